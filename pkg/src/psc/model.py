"""Transformer vector-field network over patchified video tokens.

Input is the channel concatenation [z_t, mask, y] per frame, patchified
to tokens with learned spatial/temporal/segment position embeddings.
Each block runs adaLN-modulated full self-attention over all tokens,
a gated per-frame audio injection, and an adaLN-modulated MLP. The
timestep conditions every block through the adaLN modulation vectors.

Audio note: each frame carries exactly one audio feature row, and
softmax over a single key is identically 1, so cross-attention from a
frame's video tokens to its own audio feature reduces exactly to a gated
value broadcast; the query/key projections would be inert and are not
allocated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


# Output multiplier on the (zero-initialized) adaLN modulation projections.
# Initial modulations stay exactly zero; the multiplier only rescales how
# far each optimizer step moves them. Without it the gates crawl open over
# tens of thousands of steps and the blocks stay near-inert at this
# training scale.
ADA_SCALE = 8.0


@dataclass
class DiTConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 4
    in_channels: int = 3        # z_t + mask + y, one gray channel each
    audio_dim: int = 32
    audio_hidden: int = 64
    audio_kv: int = 4           # kv slots the feature row is split into
    audio_window: int = 2       # frames per causal audio window
    samples_per_frame: int = 64
    h: int = 32
    w: int = 32
    t_max: int = 24             # temporal position table size
    mlp_ratio: int = 4
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.h % self.patch or self.w % self.patch:
            raise ValueError(f"frame {self.h}x{self.w} not divisible by patch "
                             f"{self.patch}")
        if self.audio_dim % self.audio_kv:
            raise ValueError(f"audio_dim {self.audio_dim} not divisible by "
                             f"audio_kv {self.audio_kv}")

    @property
    def audio_slot(self) -> int:
        return self.audio_dim // self.audio_kv

    @property
    def n_patches(self) -> int:
        return (self.h // self.patch) * (self.w // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch * self.patch

    @property
    def out_patch_dim(self) -> int:
        return self.patch * self.patch  # vector field has 1 channel


@dataclass
class ConditionBundle:
    """The (z_t, m, y) channel triple plus the temporal bookkeeping the
    token stream needs: how many leading frames are references and which
    source-clip position each frame occupies."""
    z_t: Tensor
    m: Tensor
    y: Tensor
    n_ref: int
    frame_indices: np.ndarray

    def __post_init__(self):
        zs, ms, ys = self.z_t.shape, self.m.shape, self.y.shape
        if not (zs == ms == ys):
            raise ValueError(f"bundle shapes differ: z_t {zs}, m {ms}, y {ys}")
        if len(zs) != 4 or zs[1] != 1:
            raise ValueError(f"bundle shape {zs} is not (T,1,H,W)")
        md = self.m.data
        if not np.all((md == 0.0) | (md == 1.0)):
            raise ValueError("bundle mask is not binary")
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        if self.frame_indices.shape != (zs[0],):
            raise ValueError(
                f"frame_indices {self.frame_indices.shape} for T={zs[0]}")
        if not 0 <= self.n_ref <= zs[0]:
            raise ValueError(f"n_ref {self.n_ref} outside [0, {zs[0]}]")

    @property
    def t_total(self) -> int:
        return self.z_t.shape[0]


@dataclass
class CondTemplate:
    """Everything in a ConditionBundle except z_t, as plain arrays: the
    fixed conditioning (mask + y channel) a sampler or loss re-pairs with
    each new interpolated/integrated state."""
    m: np.ndarray
    y: np.ndarray
    n_ref: int
    frame_indices: np.ndarray

    def __post_init__(self):
        self.m = np.ascontiguousarray(self.m, dtype=np.float32)
        self.y = np.ascontiguousarray(self.y, dtype=np.float32)
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)

    @property
    def t_total(self) -> int:
        return self.m.shape[0]

    def bundle(self, z_t: Tensor) -> ConditionBundle:
        return ConditionBundle(z_t=z_t, m=Tensor(self.m), y=Tensor(self.y),
                               n_ref=self.n_ref,
                               frame_indices=self.frame_indices)


# ---------------------------------------------------------------- init


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2 * std, 2 * std).astype(np.float32)


def init_params(config: DiTConfig, seed: int,
                warm_audio: bool = False) -> dict[str, Tensor]:
    """Truncated-normal weights, zero biases; the adaLN modulation
    projections and the final output projection start at exactly zero, so
    the initial vector field is identically zero.

    warm_audio additionally runs the deterministic energy-pretext warm
    start of the audio encoder (training entry points use it; it is part
    of initialization, not of the optimizer step count)."""
    rng = np.random.default_rng(seed)
    d = config.dim
    p: dict[str, np.ndarray] = {}

    def w(name, shape):
        p[name] = _trunc_normal(rng, shape)

    def zeros(name, shape):
        p[name] = np.zeros(shape, dtype=np.float32)

    w("patch_embed.w", (config.patch_dim, d))
    zeros("patch_embed.b", (d,))
    w("pos.spatial", (config.n_patches, d))
    w("pos.temporal", (config.t_max, d))
    w("pos.segment", (2, d))
    w("audio.null", (1, config.audio_dim))
    # The audio encoder needs unit-scale pre-activations at init: with the
    # generic 0.02 init its gelu sits in the near-linear regime and the
    # features carry almost no amplitude (energy) information, which
    # starves lip-sync learning entirely at this training scale.
    p["audio_enc.w1"] = _trunc_normal(
        rng, (config.audio_window * config.samples_per_frame,
              config.audio_hidden), std=0.3)
    zeros("audio_enc.b1", (config.audio_hidden,))
    p["audio_enc.w2"] = _trunc_normal(
        rng, (config.audio_hidden, config.audio_dim),
        std=1.0 / math.sqrt(config.audio_hidden))
    zeros("audio_enc.b2", (config.audio_dim,))
    w("temb.w1", (config.time_embed_dim, d))
    zeros("temb.b1", (d,))
    w("temb.w2", (d, d))
    zeros("temb.b2", (d,))
    mlp = config.mlp_ratio * d
    for i in range(config.depth):
        b = f"block{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"{b}.attn.{proj}", (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            zeros(f"{b}.attn.{bias}", (d,))
        # Audio cross-attention: the frame's feature row splits into
        # audio_kv key/value slots so queries (position-laden tokens) can
        # select content per token. The branch enters the residual stream
        # ungated through a zero-initialized output projection: it
        # contributes nothing at init yet needs only this one matrix to
        # grow. A zero-init adaLN gate here instead deadlocks the pathway
        # (gate gradient and branch gradient are each proportional to the
        # other) and lip sync never couples at this training scale.
        slot = config.audio_slot
        w(f"{b}.cross.wq", (d, d))
        zeros(f"{b}.cross.bq", (d,))
        p[f"{b}.cross.wk"] = _trunc_normal(
            rng, (slot, d), std=1.0 / math.sqrt(slot))
        zeros(f"{b}.cross.bk", (d,))
        p[f"{b}.cross.wv"] = _trunc_normal(
            rng, (slot, d), std=1.0 / math.sqrt(slot))
        zeros(f"{b}.cross.bv", (d,))
        zeros(f"{b}.cross.wo", (d, d))
        zeros(f"{b}.cross.bo", (d,))
        w(f"{b}.mlp.w1", (d, mlp))
        zeros(f"{b}.mlp.b1", (mlp,))
        w(f"{b}.mlp.w2", (mlp, d))
        zeros(f"{b}.mlp.b2", (d,))
        zeros(f"{b}.ada.w", (d, 6 * d))
        zeros(f"{b}.ada.b", (6 * d,))
    zeros("final.ada.w", (d, 2 * d))
    zeros("final.ada.b", (2 * d,))
    zeros("final.w", (d, config.out_patch_dim))
    zeros("final.b", (config.out_patch_dim,))
    out = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
    if warm_audio:
        from .audio import pretrain_audio_encoder
        pretrain_audio_encoder(out, config.samples_per_frame,
                               config.audio_window, seed=seed)
    return out


def time_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the flow time, scaled to a useful band."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t * 1000.0 * freqs
    return np.concatenate([np.cos(args), np.sin(args)]).astype(np.float32)


# ---------------------------------------------------------------- forward


def _patchify(z_in: Tensor, config: DiTConfig) -> Tensor:
    t_total = z_in.shape[0]
    c, p = config.in_channels, config.patch
    gh, gw = config.h // p, config.w // p
    x = T.reshape(z_in, (t_total, c, gh, p, gw, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (t_total * gh * gw, c * p * p))


def _unpatchify(tokens: Tensor, t_total: int, config: DiTConfig) -> Tensor:
    p = config.patch
    gh, gw = config.h // p, config.w // p
    x = T.reshape(tokens, (t_total, gh, gw, 1, p, p))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (t_total, 1, config.h, config.w))


def _cross_attention(x: Tensor, kv_slots: Tensor, pre: str,
                     params: dict[str, Tensor], config: DiTConfig,
                     t_total: int) -> Tensor:
    """Per-frame multi-head attention from the frame's video tokens to the
    kv slots of that frame's audio feature row."""
    n_p = config.n_patches
    n_kv = config.audio_kv
    heads, hd = config.heads, config.dim // config.heads
    d = config.dim

    q = T.add_row(T.matmul(T.layernorm(x), params[f"{pre}.wq"]),
                  params[f"{pre}.bq"])
    k = T.add_row(T.matmul(kv_slots, params[f"{pre}.wk"]),
                  params[f"{pre}.bk"])
    v = T.add_row(T.matmul(kv_slots, params[f"{pre}.wv"]),
                  params[f"{pre}.bv"])

    def split_heads(m: Tensor, rows_per_frame: int) -> Tensor:
        m = T.reshape(m, (t_total, rows_per_frame, heads, hd))
        m = T.transpose(m, (0, 2, 1, 3))
        return T.reshape(m, (t_total * heads, rows_per_frame, hd))

    qh = T.scalar_mul(split_heads(q, n_p), 1.0 / math.sqrt(hd))
    att = T.attention(qh, split_heads(k, n_kv), split_heads(v, n_kv))
    att = T.reshape(att, (t_total, heads, n_p, hd))
    merged = T.reshape(T.transpose(att, (0, 2, 1, 3)),
                       (t_total * n_p, d))
    return T.add_row(T.matmul(merged, params[f"{pre}.wo"]),
                     params[f"{pre}.bo"])


def _self_attention(x: Tensor, pre: str, params: dict[str, Tensor],
                    config: DiTConfig) -> Tensor:
    s = x.shape[0]
    hd = config.dim // config.heads

    def heads_of(name_w, name_b):
        proj = T.add_row(T.matmul(x, params[name_w]), params[name_b])
        return T.transpose(T.reshape(proj, (s, config.heads, hd)), (1, 0, 2))

    q = T.scalar_mul(heads_of(f"{pre}.wq", f"{pre}.bq"), 1.0 / math.sqrt(hd))
    k = heads_of(f"{pre}.wk", f"{pre}.bk")
    v = heads_of(f"{pre}.wv", f"{pre}.bv")
    attn = T.attention(q, k, v)
    merged = T.reshape(T.transpose(attn, (1, 0, 2)), (s, config.dim))
    return T.add_row(T.matmul(merged, params[f"{pre}.wo"]),
                     params[f"{pre}.bo"])


def forward(bundle: ConditionBundle, t: float, audio_feats: Tensor,
            params: dict[str, Tensor], config: DiTConfig,
            skip_self_attention: bool = False) -> Tensor:
    """Predict the vector field; output shape equals bundle.z_t's shape.

    `audio_feats` covers all T frames; the first n_ref rows must be zero
    placeholders and are replaced by the learned null-audio vector.
    """
    t_total = bundle.t_total
    if bundle.z_t.shape[2] != config.h or bundle.z_t.shape[3] != config.w:
        raise ValueError(f"bundle frames {bundle.z_t.shape[2:]} vs config "
                         f"{(config.h, config.w)}")
    if audio_feats.shape != (t_total, config.audio_dim):
        raise ValueError(f"audio features {audio_feats.shape} vs "
                         f"{(t_total, config.audio_dim)}")
    if np.any(bundle.frame_indices >= config.t_max):
        raise ValueError("frame index beyond temporal position table")
    n_ref = bundle.n_ref
    if n_ref > 0 and np.any(audio_feats.data[:n_ref] != 0.0):
        raise ValueError("reference-frame audio rows must be zero placeholders")

    d = config.dim
    n_p = config.n_patches

    z_in = T.concat([bundle.z_t, bundle.m, bundle.y], axis=1)
    tokens = T.add_row(T.matmul(_patchify(z_in, config),
                                params["patch_embed.w"]),
                       params["patch_embed.b"])
    spatial = T.tile_rows(params["pos.spatial"], t_total)
    temporal = T.repeat_rows(
        T.gather_rows(params["pos.temporal"], bundle.frame_indices), n_p)
    seg_idx = np.concatenate([np.zeros(n_ref, dtype=np.int64),
                              np.ones(t_total - n_ref, dtype=np.int64)])
    segment = T.repeat_rows(T.gather_rows(params["pos.segment"], seg_idx), n_p)
    x = T.add(T.add(T.add(tokens, spatial), temporal), segment)

    # timestep conditioning vector (1, dim)
    sinus = Tensor(time_embedding(t, config.time_embed_dim).reshape(1, -1))
    c = T.gelu(T.add_row(T.matmul(sinus, params["temb.w1"]), params["temb.b1"]))
    c = T.add_row(T.matmul(c, params["temb.w2"]), params["temb.b2"])
    c_act = T.gelu(c)

    # audio key/value rows: learned null vector at reference positions.
    # Features are normalized per frame so the injection pathway sees O(1)
    # inputs regardless of encoder weight scale; without this the audio
    # path trains orders of magnitude slower than the rest of the network.
    if n_ref > 0:
        tgt_rows = T.slice_axis(audio_feats, 0, n_ref, t_total)
        kv = T.concat([T.tile_rows(params["audio.null"], n_ref), tgt_rows],
                      axis=0)
    else:
        kv = audio_feats
    kv_slots = T.reshape(T.layernorm(kv),
                         (t_total * config.audio_kv, config.audio_slot))

    one = Tensor(np.ones(d, dtype=np.float32))

    for i in range(config.depth):
        b = f"block{i}"
        ada = T.reshape(T.scalar_mul(
            T.add_row(T.matmul(c_act, params[f"{b}.ada.w"]),
                      params[f"{b}.ada.b"]), ADA_SCALE), (6 * d,))
        sh_sa = T.slice_axis(ada, 0, 0, d)
        sc_sa = T.slice_axis(ada, 0, d, 2 * d)
        g_sa = T.slice_axis(ada, 0, 2 * d, 3 * d)
        sh_mlp = T.slice_axis(ada, 0, 3 * d, 4 * d)
        sc_mlp = T.slice_axis(ada, 0, 4 * d, 5 * d)
        g_mlp = T.slice_axis(ada, 0, 5 * d, 6 * d)

        if not skip_self_attention:
            h = T.add_row(T.mul_row(T.layernorm(x), T.add(sc_sa, one)), sh_sa)
            x = T.add(x, T.mul_row(_self_attention(h, f"{b}.attn", params,
                                                   config), g_sa))

        x = T.add(x, _cross_attention(x, kv_slots, f"{b}.cross", params,
                                       config, t_total))

        h = T.add_row(T.mul_row(T.layernorm(x), T.add(sc_mlp, one)), sh_mlp)
        h = T.gelu(T.add_row(T.matmul(h, params[f"{b}.mlp.w1"]),
                             params[f"{b}.mlp.b1"]))
        h = T.add_row(T.matmul(h, params[f"{b}.mlp.w2"]), params[f"{b}.mlp.b2"])
        x = T.add(x, T.mul_row(h, g_mlp))

    ada_f = T.reshape(T.scalar_mul(
        T.add_row(T.matmul(c_act, params["final.ada.w"]),
                  params["final.ada.b"]), ADA_SCALE), (2 * d,))
    sh_f = T.slice_axis(ada_f, 0, 0, d)
    sc_f = T.slice_axis(ada_f, 0, d, 2 * d)
    h = T.add_row(T.mul_row(T.layernorm(x), T.add(sc_f, one)), sh_f)
    out = T.add_row(T.matmul(h, params["final.w"]), params["final.b"])
    return _unpatchify(out, t_total, config)
