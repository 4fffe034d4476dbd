"""Deterministic ODE sampling of the learned vector field, and
distillation of the multi-step sampler into a few-step student.

Reference frames, when present, are held on their known interpolation
path at every integration time (their clean pixels sit in the template's
y channel), so the attention context matches what training showed the
model. Generated frames are never clamped mid-trajectory.

Distillation here is trajectory-output regression: the student (weights
initialized from the teacher) minimizes the MSE between its K-step
integration and the frozen teacher's N-step integration on shared
(x_0, condition, audio) draws, backpropagating through the K unrolled
steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .audio import causal_encode
from .checkpoint import Checkpoint, model_config_from_meta
from .model import CondTemplate, DiTConfig, forward
from .optim import AdamWConfig, adamw_init, adamw_step, clip_global_norm
from .stage1 import SegmentPair, build_inpaint_condition, collect_grads, \
    encode_target_audio, sample_training_pair
from .tensor import Tensor
from .world import SceneRecord, VideoClip


@dataclass
class SampleConfig:
    steps: int = 32
    scheme: str = "euler"  # euler | heun
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.scheme not in ("euler", "heun"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


def integrate(field_fn, x_0: Tensor, steps: int, scheme: str,
              state_fix=None) -> Tensor:
    """Integrate dz/dt = field(z, t) from t=0 to 1. `state_fix(z, t)` is
    applied before every field evaluation and once at t=1 (used to pin
    reference frames to their known path)."""
    dt = 1.0 / steps
    z = x_0
    for i in range(steps):
        t_i = i / steps
        if state_fix is not None:
            z = state_fix(z, t_i)
        v1 = field_fn(z, t_i)
        if scheme == "euler":
            z = T.add(z, T.scalar_mul(v1, dt))
        else:
            zp = T.add(z, T.scalar_mul(v1, dt))
            t_n = (i + 1) / steps
            if state_fix is not None:
                zp = state_fix(zp, t_n)
            v2 = field_fn(zp, t_n)
            z = T.add(z, T.scalar_mul(T.add(v1, v2), 0.5 * dt))
    if state_fix is not None:
        z = state_fix(z, 1.0)
    return z


def make_ref_fix(template: CondTemplate, x_0: np.ndarray):
    """Pin the leading n_ref frames to (1-t)*x0_ref + t*ref_pixels."""
    n_ref = template.n_ref
    if n_ref == 0:
        return None
    t_total = template.t_total
    ref_vals = template.y[:n_ref]
    x0_ref = x_0[:n_ref]

    def fix(z: Tensor, t: float) -> Tensor:
        known = Tensor(((1.0 - t) * x0_ref + t * ref_vals).astype(np.float32))
        return T.concat([known, T.slice_axis(z, 0, n_ref, t_total)], axis=0)

    return fix


def model_field(params: dict[str, Tensor], config: DiTConfig,
                template: CondTemplate, audio_feats: Tensor):
    def field_fn(z: Tensor, t: float) -> Tensor:
        return forward(template.bundle(z), t, audio_feats, params, config)
    return field_fn


def draw_x0(template: CondTemplate, config: DiTConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    shape = (template.t_total, 1, config.h, config.w)
    return rng.standard_normal(shape).astype(np.float32)


def ode_sample(params: dict[str, Tensor], config: DiTConfig,
               template: CondTemplate, audio_feats: Tensor,
               sample_cfg: SampleConfig,
               x_0: np.ndarray | None = None) -> VideoClip:
    """Sample the target frames: integrate from noise, crop the reference
    prefix, clamp to [0, 1]."""
    if x_0 is None:
        x_0 = draw_x0(template, config, sample_cfg.seed)
    z1 = integrate(model_field(params, config, template, audio_feats),
                   Tensor(x_0), sample_cfg.steps, sample_cfg.scheme,
                   state_fix=make_ref_fix(template, x_0))
    out = np.clip(z1.data[template.n_ref:], 0.0, 1.0)
    return VideoClip(out)


def inpaint_dub(scene: SceneRecord, params: dict[str, Tensor],
                config: DiTConfig, audio, sample_cfg: SampleConfig) -> VideoClip:
    """Mask-inpainting inference: the scene's entire original clip is the
    reference sequence, and every frame is re-generated with its lower-face
    rectangle masked, driven by `audio`."""
    from .stage1 import mask_rect  # local import to avoid a module cycle

    t_frames = scene.spec.t_frames
    h, w = scene.spec.h, scene.spec.w
    frames = scene.clip.frames
    m = np.ones((2 * t_frames, 1, h, w), dtype=np.float32)
    y = np.concatenate([frames, frames]).astype(np.float32)
    for t in range(t_frames):
        r0, r1, c0, c1 = mask_rect(scene.spec, t)
        m[t_frames + t, 0, r0:r1, c0:c1] = 0.0
        y[t_frames + t, 0, r0:r1, c0:c1] = 0.0
    frame_indices = np.concatenate([np.arange(t_frames), np.arange(t_frames)])
    template = CondTemplate(m=m, y=y, n_ref=t_frames,
                            frame_indices=frame_indices)
    feats_tgt = causal_encode(audio, params, config.audio_window)
    feats = T.concat([Tensor(np.zeros((t_frames, config.audio_dim),
                                      dtype=np.float32)), feats_tgt], axis=0)
    return ode_sample(params, config, template, feats, sample_cfg)


# ------------------------------------------------------------ distillation


@dataclass
class DistillConfig:
    k: int = 4
    teacher_steps: int = 32
    steps: int = 60
    bank: int = 24
    lr: float = 1e-4
    seed: int = 0
    ref_len: int = 8
    tgt_len: int = 8
    scheme: str = "euler"
    clip_norm: float = 1.0
    log_every: int = 10


@dataclass
class DistillDraw:
    """One shared (x_0, condition, audio) draw with the teacher's output."""
    template: CondTemplate
    x_0: np.ndarray
    scene: SceneRecord
    pair: SegmentPair
    teacher_tgt: np.ndarray  # raw integrated state, target frames


def teacher_rollout(params: dict[str, Tensor], config: DiTConfig,
                    template: CondTemplate, x_0: np.ndarray,
                    scene: SceneRecord, pair: SegmentPair, steps: int,
                    scheme: str) -> np.ndarray:
    feats = encode_target_audio(scene, pair.tgt_start, pair.tgt_len,
                                pair.ref_len, params, config)
    z1 = integrate(model_field(params, config, template, feats),
                   Tensor(x_0), steps, scheme,
                   state_fix=make_ref_fix(template, x_0))
    return z1.data[template.n_ref:].copy()


def build_distill_bank(teacher_params: dict[str, Tensor], config: DiTConfig,
                       dataset: list[SceneRecord], cfg: DistillConfig,
                       n: int, rng: np.random.Generator) -> list[DistillDraw]:
    bank = []
    for _ in range(n):
        scene = dataset[int(rng.integers(len(dataset)))]
        pair = sample_training_pair(scene, rng, cfg.ref_len, cfg.tgt_len)
        template, x_1 = build_inpaint_condition(pair)
        x_0 = rng.standard_normal(x_1.shape).astype(np.float32)
        tgt = teacher_rollout(teacher_params, config, template, x_0, scene,
                              pair, cfg.teacher_steps, cfg.scheme)
        bank.append(DistillDraw(template=template, x_0=x_0, scene=scene,
                                pair=pair, teacher_tgt=tgt))
    return bank


def student_rollout_loss(params: dict[str, Tensor], config: DiTConfig,
                         draw: DistillDraw, k: int, scheme: str) -> Tensor:
    """MSE between the student's K-step integration and the stored teacher
    output, over target frames; differentiable through all K steps."""
    feats = encode_target_audio(draw.scene, draw.pair.tgt_start,
                                draw.pair.tgt_len, draw.pair.ref_len,
                                params, config)
    z1 = integrate(model_field(params, config, draw.template, feats),
                   Tensor(draw.x_0), k, scheme,
                   state_fix=make_ref_fix(draw.template, draw.x_0))
    tgt = T.slice_axis(z1, 0, draw.template.n_ref, draw.template.t_total)
    diff = T.sub(tgt, Tensor(draw.teacher_tgt))
    return T.scalar_mul(T.sum_sq(diff), 1.0 / draw.teacher_tgt.size)


def distill_student(teacher: Checkpoint, dataset: list[SceneRecord],
                    cfg: DistillConfig) -> Checkpoint:
    """Train a K-step student initialized from the teacher's weights."""
    if cfg.k >= cfg.teacher_steps:
        raise ValueError(f"student steps {cfg.k} must be < teacher steps "
                         f"{cfg.teacher_steps}")
    config = model_config_from_meta(teacher.meta)
    teacher_params = {k: Tensor(v.data) for k, v in teacher.tensors.items()}
    params = teacher.params()
    rng = np.random.default_rng(cfg.seed)
    t0 = time.time()
    if cfg.steps > 0:
        bank = build_distill_bank(teacher_params, config, dataset, cfg,
                                  cfg.bank, rng)
        state = adamw_init(params)
        for step in range(cfg.steps):
            draw = bank[step % len(bank)]
            with T.graph():
                loss = student_rollout_loss(params, config, draw, cfg.k,
                                            cfg.scheme)
                gmap = T.backward(loss)
            grads = collect_grads(params, gmap)
            clip_global_norm(grads, cfg.clip_norm)
            adamw_step(params, grads, state,
                       AdamWConfig(lr=cfg.lr, weight_decay=0.0))
    meta = dict(teacher.meta)
    meta.update({"stage": "student", "student.k": str(cfg.k),
                 "student.teacher_steps": str(cfg.teacher_steps),
                 "student.steps": str(cfg.steps),
                 "student.wall_s": f"{time.time() - t0:.1f}"})
    tensors = {k: Tensor(v.data.copy()) for k, v in params.items()}
    return Checkpoint(tensors=tensors, meta=meta)


def distill_gaps(teacher: Checkpoint, students: dict[int, Checkpoint],
                 dataset: list[SceneRecord], n_conditions: int, seed: int,
                 teacher_steps: int = 32, scheme: str = "euler",
                 ref_len: int = 8, tgt_len: int = 8) -> dict[int, float]:
    """Mean per-pixel MSE between each student's K-step output and the
    teacher's N-step output on fresh held-out (x_0, condition, audio)
    draws. Teacher rollouts are shared across students."""
    config = model_config_from_meta(teacher.meta)
    t_params = {n: Tensor(v.data) for n, v in teacher.tensors.items()}
    s_params = {k: {n: Tensor(v.data) for n, v in ck.tensors.items()}
                for k, ck in students.items()}
    rng = np.random.default_rng(seed)
    totals = {k: 0.0 for k in students}
    for _ in range(n_conditions):
        scene = dataset[int(rng.integers(len(dataset)))]
        pair = sample_training_pair(scene, rng, ref_len, tgt_len)
        template, x_1 = build_inpaint_condition(pair)
        x_0 = rng.standard_normal(x_1.shape).astype(np.float32)
        t_out = teacher_rollout(t_params, config, template, x_0, scene, pair,
                                teacher_steps, scheme)
        for k, sp in s_params.items():
            s_out = teacher_rollout(sp, config, template, x_0, scene, pair,
                                    k, scheme)
            totals[k] += float(((t_out - s_out) ** 2).mean())
    return {k: v / n_conditions for k, v in totals.items()}


def distill_gap(teacher: Checkpoint, student: Checkpoint,
                dataset: list[SceneRecord], n_conditions: int, seed: int,
                k: int | None = None, teacher_steps: int = 32,
                scheme: str = "euler", ref_len: int = 8,
                tgt_len: int = 8) -> float:
    if k is None:
        k = int(student.meta.get("student.k", 4))
    gaps = distill_gaps(teacher, {k: student}, dataset, n_conditions, seed,
                        teacher_steps, scheme, ref_len, tgt_len)
    return gaps[k]
