"""Mask-inpainting training: segment sampling, lower-face rectangle
masking, condition assembly, the flow-matching objective, and the loop.

The training unit is one pair of non-contiguous, non-overlapping segments
from a single scene: the reference segment enters fully known (mask all
ones, y = pixels), the target segment has its lower-face rectangle zeroed
in y and flagged 0 in the mask. The model regresses x_1 - x_0 at a
uniformly sampled interpolation time.
"""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .audio import causal_encode
from .checkpoint import Checkpoint, meta_from_model_config
from .model import CondTemplate, DiTConfig, forward, init_params
from .optim import AdamWConfig, adamw_init, adamw_step, clip_global_norm, \
    cosine_warmup_lr
from .tensor import Tensor
from .world import SceneRecord, SceneSpec

MASK_PAD_X = 2
MASK_PAD_TOP = 1
MASK_PAD_BOT = 1


@dataclass
class TrainConfig:
    steps: int = 2200
    base_lr: float = 2e-4
    warmup: int = 110
    batch_size: int = 1
    seed: int = 0
    ref_len: int = 8
    tgt_len: int = 8
    loss_all_frames: bool = False  # loss-domain flag; default target frames only
    t_power: float = 1.0  # t ~ 1 - u**(1/(1+p)): p=0 uniform, p>0 low-biased
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    log_every: int = 1

    def __post_init__(self):
        if self.warmup >= self.steps and self.steps > 0:
            raise ValueError(f"warmup {self.warmup} must be < steps {self.steps}")


@dataclass
class SegmentPair:
    ref_start: int
    tgt_start: int
    ref_len: int
    tgt_len: int
    ref_frames: np.ndarray   # (ref_len, 1, H, W)
    tgt_frames: np.ndarray   # (tgt_len, 1, H, W)
    scene: SceneRecord


def mask_rect(spec: SceneSpec, t: int) -> tuple[int, int, int, int]:
    """Lower-face rectangle (r0, r1, c0, c1), end-exclusive: the mouth box
    widened by MASK_PAD_X, stretched from just above the mouth to just
    below the chin."""
    top, left, _, mw = spec.mouth_box[t]
    cy = spec.face_center[t, 0]
    r0 = int(top - MASK_PAD_TOP)
    r1 = int(cy + spec.face_radius + MASK_PAD_BOT + 1)
    c0 = int(left - MASK_PAD_X)
    c1 = int(left + mw + MASK_PAD_X)
    if not (0 <= r0 < r1 <= spec.h and 0 <= c0 < c1 <= spec.w):
        raise ValueError(f"mask rectangle out of bounds at frame {t}")
    return r0, r1, c0, c1


@functools.lru_cache(maxsize=None)
def valid_placements(t_frames: int, ref_len: int, tgt_len: int) -> tuple[tuple[int, int], ...]:
    """All (ref_start, tgt_start) with non-overlapping, non-contiguous
    segments (gap >= 1 frame)."""
    out = []
    for a in range(t_frames - ref_len + 1):
        for b in range(t_frames - tgt_len + 1):
            if b >= a + ref_len + 1 or a >= b + tgt_len + 1:
                out.append((a, b))
    return tuple(out)


def sample_training_pair(scene: SceneRecord, rng: np.random.Generator,
                         ref_len: int, tgt_len: int) -> SegmentPair:
    t_frames = scene.spec.t_frames
    if t_frames < ref_len + tgt_len + 1:
        raise ValueError(
            f"scene length {t_frames} < ref {ref_len} + tgt {tgt_len} + 1")
    placements = valid_placements(t_frames, ref_len, tgt_len)
    a, b = placements[int(rng.integers(len(placements)))]
    frames = scene.clip.frames
    return SegmentPair(ref_start=a, tgt_start=b, ref_len=ref_len,
                       tgt_len=tgt_len,
                       ref_frames=frames[a:a + ref_len].copy(),
                       tgt_frames=frames[b:b + tgt_len].copy(),
                       scene=scene)


def build_inpaint_condition(pair: SegmentPair,
                            rect_fn=mask_rect) -> tuple[CondTemplate, np.ndarray]:
    """Returns (template, x_1): reference frames enter with mask 1 and
    y = pixels; target frames get the lower-face rectangle zeroed in y and
    flagged 0 in the mask. x_1 is the clean ref ++ tgt concatenation."""
    spec = pair.scene.spec
    t_total = pair.ref_len + pair.tgt_len
    h, w = spec.h, spec.w
    m = np.ones((t_total, 1, h, w), dtype=np.float32)
    y = np.concatenate([pair.ref_frames, pair.tgt_frames]).astype(np.float32)
    for i in range(pair.tgt_len):
        src_t = pair.tgt_start + i
        r0, r1, c0, c1 = rect_fn(spec, src_t)
        m[pair.ref_len + i, 0, r0:r1, c0:c1] = 0.0
        y[pair.ref_len + i, 0, r0:r1, c0:c1] = 0.0
    x_1 = np.concatenate([pair.ref_frames, pair.tgt_frames]).astype(np.float32)
    frame_indices = np.concatenate([
        np.arange(pair.ref_start, pair.ref_start + pair.ref_len),
        np.arange(pair.tgt_start, pair.tgt_start + pair.tgt_len)])
    template = CondTemplate(m=m, y=y, n_ref=pair.ref_len,
                            frame_indices=frame_indices)
    return template, x_1


def loss_mask_for(template: CondTemplate, all_frames: bool) -> np.ndarray:
    lm = np.ones((template.t_total,) + template.m.shape[1:], dtype=np.float32)
    if not all_frames:
        lm[:template.n_ref] = 0.0
    return lm


def interpolate(t: float, x_0: np.ndarray, x_1: np.ndarray) -> np.ndarray:
    """Straight-line interpolant; bitwise x_0 at t=0 and x_1 at t=1."""
    return (1.0 - t) * x_0 + t * x_1


def sample_t(rng: np.random.Generator, power: float) -> float:
    """Interpolation-time draw. power=0 is uniform; power>0 biases low
    (Beta(1, 1+power)), where the conditioning is the only mouth source."""
    if power <= 0.0:
        return float(rng.uniform())
    return float(1.0 - rng.uniform() ** (1.0 / (1.0 + power)))


def fm_loss(params: dict[str, Tensor], template: CondTemplate,
            x_1: np.ndarray, audio_feats: Tensor, t: float, x_0: np.ndarray,
            loss_mask: np.ndarray, config: DiTConfig,
            field_override=None) -> Tensor:
    """Masked MSE between the predicted field and x_1 - x_0 at z_t.
    `field_override(bundle, t)` substitutes the network in oracle tests."""
    z_t = interpolate(t, x_0, x_1).astype(np.float32)
    bundle = template.bundle(Tensor(z_t))
    if field_override is not None:
        v = field_override(bundle, t)
    else:
        v = forward(bundle, t, audio_feats, params, config)
    target = Tensor((x_1 - x_0).astype(np.float32))
    masked = T.mul(T.sub(v, target), Tensor(loss_mask))
    count = float(loss_mask.sum())
    return T.scalar_mul(T.sum_sq(masked), 1.0 / count)


def encode_target_audio(scene: SceneRecord, tgt_start: int, tgt_len: int,
                        n_ref: int, params: dict[str, Tensor],
                        config: DiTConfig) -> Tensor:
    """Audio features for the assembled sequence: zeros at reference rows,
    stream-causal features at the target rows."""
    feats_full = causal_encode(scene.audio, params, config.audio_window)
    tgt = T.slice_axis(feats_full, 0, tgt_start, tgt_start + tgt_len)
    if n_ref == 0:
        return tgt
    zeros = Tensor(np.zeros((n_ref, config.audio_dim), dtype=np.float32))
    return T.concat([zeros, tgt], axis=0)


def collect_grads(params: dict[str, Tensor], gmap: dict[int, Tensor]) -> dict[str, Tensor]:
    out = {}
    for name, p in params.items():
        if p.node_id is not None and p.node_id in gmap:
            out[name] = gmap[p.node_id]
        else:
            out[name] = Tensor(np.zeros_like(p.data))
    return out


def train_stage1(dataset: list[SceneRecord], model_cfg: DiTConfig,
                 cfg: TrainConfig, log_path: Path | None = None) -> Checkpoint:
    """Full training loop; deterministic for a fixed seed."""
    if not dataset:
        raise ValueError("empty dataset")
    params = init_params(model_cfg, cfg.seed, warm_audio=True)
    state = adamw_init(params)
    rng = np.random.default_rng(cfg.seed)
    log_rows = ["step,loss,lr"]
    t0 = time.time()
    for step in range(cfg.steps):
        lr = cosine_warmup_lr(step, cfg.base_lr, cfg.warmup, cfg.steps)
        acc: dict[str, Tensor] | None = None
        loss_val = 0.0
        for _ in range(cfg.batch_size):
            scene = dataset[int(rng.integers(len(dataset)))]
            pair = sample_training_pair(scene, rng, cfg.ref_len, cfg.tgt_len)
            template, x_1 = build_inpaint_condition(pair)
            t = sample_t(rng, cfg.t_power)
            x_0 = rng.standard_normal(x_1.shape).astype(np.float32)
            lm = loss_mask_for(template, cfg.loss_all_frames)
            with T.graph():
                feats = encode_target_audio(scene, pair.tgt_start,
                                            pair.tgt_len, pair.ref_len,
                                            params, model_cfg)
                loss = fm_loss(params, template, x_1, feats, t, x_0, lm,
                               model_cfg)
                gmap = T.backward(loss)
            grads = collect_grads(params, gmap)
            loss_val += loss.item()
            if acc is None:
                acc = grads
            else:
                for k in acc:
                    acc[k].data += grads[k].data
        if cfg.batch_size > 1:
            for k in acc:
                acc[k].data /= cfg.batch_size
        loss_val /= cfg.batch_size
        clip_global_norm(acc, cfg.clip_norm)
        adamw_step(params, acc, state,
                   AdamWConfig(lr=lr, weight_decay=cfg.weight_decay))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log_rows.append(f"{step},{loss_val:.6f},{lr:.8f}")
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("\n".join(log_rows) + "\n")
    meta = meta_from_model_config(model_cfg)
    meta.update({"stage": "1", "step": str(cfg.steps), "seed": str(cfg.seed),
                 "train.ref_len": str(cfg.ref_len),
                 "train.tgt_len": str(cfg.tgt_len),
                 "train.base_lr": str(cfg.base_lr),
                 "train.wall_s": f"{time.time() - t0:.1f}"})
    tensors = {k: Tensor(v.data.copy()) for k, v in params.items()}
    return Checkpoint(tensors=tensors, meta=meta)
