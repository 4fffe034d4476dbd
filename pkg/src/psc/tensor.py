"""Dense f32 tensors with tape-based reverse-mode autodiff.

Design constraints: row-major storage, explicit shapes, no implicit
broadcasting (row-wise bias/scale ops exist as dedicated ops with strict
shape checks). One active graph at a time; the graph is an append-only
tape whose append order is a valid topological order, consumed by a
single backward pass.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float32
LAYERNORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class Node:
    """One tape entry: op tag, parent node ids, and a backward closure.

    ``backward(grad) -> tuple of parent grads`` uses values the forward
    closure captured. Leaf nodes have ``backward = None``.
    """

    __slots__ = ("op", "parents", "backward", "shape")

    def __init__(self, op: str, parents: tuple, backward, shape: tuple):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.shape = shape


class Graph:
    """Append-only computation tape. Append order == topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[int, tuple] = {}  # node id -> shape
        self.consumed = False

    def add(self, op: str, parents: tuple, backward, shape: tuple) -> int:
        self.nodes.append(Node(op, parents, backward, shape))
        return len(self.nodes) - 1

    def add_leaf(self, shape: tuple) -> int:
        nid = self.add("leaf", (), None, shape)
        self.leaves[nid] = shape
        return nid


_ACTIVE: Optional[Graph] = None


@contextlib.contextmanager
def graph():
    """Activate a fresh graph for the duration of the block."""
    global _ACTIVE
    if _ACTIVE is not None:
        raise RuntimeError("a graph is already active; one graph per step")
    g = Graph()
    _ACTIVE = g
    try:
        yield g
    finally:
        _ACTIVE = None


def active_graph() -> Optional[Graph]:
    return _ACTIVE


class Tensor:
    """Dense n-d array; participates in the active graph when reachable
    from a requires_grad leaf."""

    __slots__ = ("data", "requires_grad", "_graph", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self._graph: Optional[Graph] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _track(t: Tensor) -> Optional[int]:
    """Node id of t in the active graph; registers requires_grad leaves."""
    if _ACTIVE is None:
        return None
    if t._graph is _ACTIVE and t.node_id is not None:
        return t.node_id
    if t.requires_grad:
        t._graph = _ACTIVE
        t.node_id = _ACTIVE.add_leaf(t.data.shape)
        return t.node_id
    return None


def _result(data: np.ndarray, op: str, parents_ids: Sequence[Optional[int]],
            backward: Optional[Callable]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._graph = None
    out.node_id = None
    if _ACTIVE is not None and any(p is not None for p in parents_ids):
        ids = tuple(p for p in parents_ids if p is not None)
        keep = tuple(i for i, p in enumerate(parents_ids) if p is not None)
        if len(ids) == len(parents_ids):
            bw = backward
        else:
            def bw(g, _backward=backward, _keep=keep):
                full = _backward(g)
                return tuple(full[i] for i in _keep)
        out._graph = _ACTIVE
        out.node_id = _ACTIVE.add(op, ids, bw, data.shape)
    return out


# ---------------------------------------------------------------- forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; rank >= 2, leading (batch) dims must match exactly."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim != bd.ndim \
            or ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: {ad.shape} vs {bd.shape}")
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, "matmul", (_track(a), _track(b)), backward)


def _binary(op: str, a: Tensor, b: Tensor, fwd, bwd) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: {a.data.shape} vs {b.data.shape}")
    return _result(fwd(a.data, b.data), op, (_track(a), _track(b)), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, "scalar_mul", (_track(a),),
                   lambda g: (g * c,))


def add_row(x: Tensor, v: Tensor) -> Tensor:
    """Add a vector v of shape (D,) to every row of x (..., D)."""
    if v.data.ndim != 1 or x.data.shape[-1] != v.data.shape[0]:
        raise ShapeError(f"add_row: {x.data.shape} vs {v.data.shape}")
    d = v.data.shape[0]

    def backward(g):
        return g, g.reshape(-1, d).sum(axis=0)

    return _result(x.data + v.data, "add_row", (_track(x), _track(v)), backward)


def mul_row(x: Tensor, v: Tensor) -> Tensor:
    """Multiply every row of x (..., D) elementwise by v of shape (D,)."""
    if v.data.ndim != 1 or x.data.shape[-1] != v.data.shape[0]:
        raise ShapeError(f"mul_row: {x.data.shape} vs {v.data.shape}")
    xd, vd = x.data, v.data
    d = vd.shape[0]

    def backward(g):
        return g * vd, (g * xd).reshape(-1, d).sum(axis=0)

    return _result(xd * vd, "mul_row", (_track(x), _track(v)), backward)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each leading-axis row k times consecutively."""
    if k < 1:
        raise ShapeError(f"repeat_rows: k={k} must be >= 1")
    n = x.data.shape[0]
    rest = x.data.shape[1:]

    def backward(g):
        return (g.reshape((n, k) + rest).sum(axis=1),)

    return _result(np.repeat(x.data, k, axis=0), "repeat_rows",
                   (_track(x),), backward)


def tile_rows(x: Tensor, k: int) -> Tensor:
    """Stack k copies of x along the leading axis."""
    if k < 1:
        raise ShapeError(f"tile_rows: k={k} must be >= 1")
    shp = x.data.shape

    def backward(g):
        return (g.reshape((k,) + shp).sum(axis=0),)

    reps = (k,) + (1,) * (x.data.ndim - 1)
    return _result(np.tile(x.data, reps), "tile_rows", (_track(x),), backward)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Select rows of table by an index vector (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or table.data.ndim < 2:
        raise ShapeError(f"gather_rows: table {table.data.shape}, idx {idx.shape}")
    td = table.data

    def backward(g):
        acc = np.zeros_like(td)
        np.add.at(acc, idx, g)
        return (acc,)

    return _result(td[idx], "gather_rows", (_track(table),), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.data.shape
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: {old} -> {shape}")

    def backward(g):
        return (g.reshape(old),)

    return _result(np.ascontiguousarray(x.data.reshape(shape)), "reshape",
                   (_track(x),), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} for shape {x.data.shape}")
    inv = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), "transpose",
                   (_track(x),), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input")
    shapes = [p.data.shape for p in parts]
    ref = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(ref) or any(
                i != axis and s[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"concat: {shapes} along axis {axis}")
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(
                np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(sizes)))

    return _result(np.concatenate([p.data for p in parts], axis=axis),
                   "concat", tuple(_track(p) for p in parts), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] on axis {axis} of {x.data.shape}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    shp = x.data.shape

    def backward(g):
        acc = np.zeros(shp, dtype=g.dtype)
        acc[sl] = g
        return (acc,)

    return _result(np.ascontiguousarray(x.data[sl]), "slice",
                   (_track(x),), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _result(out, "softmax", (_track(x),), backward)


def layernorm(x: Tensor, gain: Optional[Tensor] = None,
              bias: Optional[Tensor] = None, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the
    optional learnable per-channel gain and bias."""
    xd = x.data
    d = xd.shape[-1]
    if gain is not None and gain.data.shape != (d,):
        raise ShapeError(f"layernorm: gain {gain.data.shape} for last dim {d}")
    if bias is not None and bias.data.shape != (d,):
        raise ShapeError(f"layernorm: bias {bias.data.shape} for last dim {d}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    gd = gain.data if gain is not None else None
    bd = bias.data if bias is not None else None
    if gd is not None:
        out = out * gd
    if bd is not None:
        out = out + bd

    def backward(g):
        gx = g * gd if gd is not None else g
        mean_g = gx.mean(axis=-1, keepdims=True)
        mean_gx = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx - mean_g - xhat * mean_gx)
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    parents = [_track(x)]
    if gain is not None:
        parents.append(_track(gain))
    if bias is not None:
        parents.append(_track(bias))
    return _result(np.ascontiguousarray(out), "layernorm", tuple(parents), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) gelu."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi

    def backward(g):
        dens = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi + xd * dens),)

    return _result(out.astype(xd.dtype, copy=False), "gelu", (_track(x),), backward)


def _softmax_lastaxis_inplace(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis, minimizing array passes."""
    m = x.max(axis=-1, keepdims=True)
    x -= m
    np.exp(x, out=x)
    s = x.sum(axis=-1, keepdims=True)
    x /= s
    return x


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled-dot-product attention core on (heads, S, head_dim) inputs.
    The caller folds any score scaling into q. Without an active graph the
    score matrix is streamed in query chunks and never fully materialized;
    with a graph the probabilities are kept for the backward pass.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.ndim != 3 or kd.shape != vd.shape or kd.ndim != 3 \
            or qd.shape[0] != kd.shape[0] or qd.shape[2] != kd.shape[2] \
            or 0 in qd.shape or 0 in kd.shape:
        raise ShapeError(f"attention: q {qd.shape}, k {kd.shape}, v {vd.shape}")
    heads, s, hd = qd.shape
    kt = np.ascontiguousarray(np.swapaxes(kd, -1, -2))

    grads_needed = _ACTIVE is not None and (
        _track(q) is not None or _track(k) is not None
        or _track(v) is not None)
    if not grads_needed:
        out = np.empty_like(qd)
        # chunk size targets a working set of a few MB per score block
        chunk = max(64, min(s, (1 << 22) // max(1, 4 * s)))
        for lo in range(0, s, chunk):
            hi = min(s, lo + chunk)
            scores = qd[:, lo:hi] @ kt
            _softmax_lastaxis_inplace(scores)
            np.matmul(scores, vd, out=out[:, lo:hi])
        return _result(out, "attention", (None, None, None), None)

    probs = qd @ kt
    _softmax_lastaxis_inplace(probs)
    out = probs @ vd

    def backward(g):
        dv = np.swapaxes(probs, -1, -2) @ g
        dp = g @ np.swapaxes(vd, -1, -2)
        dp *= probs
        dp -= probs * dp.sum(axis=-1, keepdims=True)
        dq = dp @ kd
        dk = np.swapaxes(np.swapaxes(qd, -1, -2) @ dp, -1, -2)
        return dq, np.ascontiguousarray(dk), dv

    return _result(out, "attention", (_track(q), _track(k), _track(v)),
                   backward)


def mean(x: Tensor) -> Tensor:
    """Mean over all elements; returns a scalar tensor."""
    n = x.data.size
    shp = x.data.shape

    def backward(g):
        return (np.full(shp, g / n, dtype=x.data.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.data.dtype), "mean",
                   (_track(x),), backward)


def sum_sq(x: Tensor) -> Tensor:
    """Sum of squared elements; returns a scalar tensor."""
    xd = x.data

    def backward(g):
        return (2.0 * g * xd,)

    return _result(np.asarray((xd * xd).sum(), dtype=xd.dtype), "sum_sq",
                   (_track(x),), backward)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss. Returns {leaf node id -> grad}.

    Every requires_grad leaf registered in the graph gets an entry, zero
    where the loss does not depend on it. The graph is consumed.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    g = loss._graph
    if g is None or loss.node_id is None:
        raise ValueError("backward: loss was not produced under an active graph")
    if g.consumed:
        raise RuntimeError("backward: graph already consumed")
    g.consumed = True

    grads: list[Optional[np.ndarray]] = [None] * len(g.nodes)
    grads[loss.node_id] = np.asarray(1.0, dtype=loss.data.dtype)
    for nid in range(loss.node_id, -1, -1):
        gout = grads[nid]
        grads[nid] = None  # release as we go
        if gout is None:
            continue
        node = g.nodes[nid]
        if node.backward is None:
            grads[nid] = gout  # leaf: keep
            continue
        pgrads = node.backward(gout)
        for pid, pg in zip(node.parents, pgrads):
            if pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg

    out: dict[int, Tensor] = {}
    for nid, shape in g.leaves.items():
        arr = grads[nid]
        if arr is None:
            arr = np.zeros(shape, dtype=DTYPE)
        out[nid] = Tensor(arr)
    return out
