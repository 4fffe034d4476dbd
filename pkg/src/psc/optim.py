"""AdamW with decoupled weight decay, global-norm clipping, and the
warmup + cosine learning-rate schedule used by both training stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_init(params: dict[str, Tensor]) -> AdamWState:
    state = AdamWState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(params: dict[str, Tensor], grads: dict[str, Tensor],
               state: AdamWState, config: AdamWConfig):
    """One AdamW update, in place on the parameter tensors.

    Weight decay is decoupled: p <- p - lr*wd*p, applied independently of
    the moment-based update.
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError(
            "adamw_step: name sets differ "
            f"(params={len(params)}, grads={len(grads)}, state={len(state.m)})")
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name in params:
        p = params[name].data
        g = grads[name].data
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: shape mismatch for {name}: "
                             f"{g.shape} vs {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        if config.weight_decay != 0.0:
            p *= 1.0 - config.lr * config.weight_decay
        p -= config.lr * (mhat / (np.sqrt(vhat) + config.eps))
    return params, state


def clip_global_norm(grads: dict[str, Tensor], max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name].data
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for name in grads:
            grads[name].data *= scale
    return norm


def cosine_warmup_lr(step: int, base: float, warmup: int, total: int) -> float:
    """lr(s): linear ramp reaching base exactly at s == warmup, then cosine
    decay to ~0 at s == total."""
    if warmup >= total:
        raise ValueError(f"warmup {warmup} must be < total {total}")
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / (total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))
