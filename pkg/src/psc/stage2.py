"""Restoration training on pseudo-pairs and mask-free inference.

The model is conditioned on the synthetic clip through the y channel with
the mask channel all ones (kept so stage-1 weights load unchanged), hears
the audio that matches the ground truth, and is trained to reconstruct
the ground truth. No reference frames are concatenated: the sequence is
exactly the clip window, which is what makes stage-2 inference cheap.
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .audio import causal_encode
from .checkpoint import Checkpoint, model_config_from_meta
from .model import CondTemplate, DiTConfig
from .optim import AdamWConfig, adamw_init, adamw_step, clip_global_norm, \
    cosine_warmup_lr
from .pairs import PseudoPair
from .sampling import SampleConfig, ode_sample
from .stage1 import TrainConfig, collect_grads, fm_loss, sample_t
from .tensor import Tensor
from .world import AudioTrack, VideoClip

PairSource = Union[Sequence[PseudoPair],
                   Callable[[np.random.Generator], PseudoPair]]


def build_maskfree_condition(pair: PseudoPair, start: int = 0,
                             length: int | None = None,
                             frame_offset: int = 0
                             ) -> tuple[CondTemplate, np.ndarray]:
    """Assemble the restoration condition for a window of the pair:
    y = synthetic frames, mask all ones, training target = ground truth.
    `frame_offset` relabels the temporal position indices (scene layouts
    are drawn independently of absolute time, so indices are exchangeable;
    the relabeling exercises the whole temporal table)."""
    t_pair = pair.x_gt.frames.shape[0]
    if length is None:
        length = t_pair
    if not (0 <= start and start + length <= t_pair):
        raise ValueError(f"window [{start}, {start + length}) outside "
                         f"clip of {t_pair} frames")
    y = pair.x_gen.frames[start:start + length].copy()
    x_1 = pair.x_gt.frames[start:start + length].copy()
    m = np.ones_like(y)
    frame_indices = frame_offset + np.arange(length)
    template = CondTemplate(m=m, y=y, n_ref=0, frame_indices=frame_indices)
    return template, x_1


def encode_window_audio(audio: AudioTrack, start: int, length: int,
                        params: dict[str, Tensor],
                        config: DiTConfig) -> Tensor:
    """Stream-causal features for a frame window of the full audio."""
    feats_full = causal_encode(audio, params, config.audio_window)
    return T.slice_axis(feats_full, 0, start, start + length)


def train_stage2(init: Checkpoint, pair_source: PairSource,
                 cfg: TrainConfig, log_path: Path | None = None) -> Checkpoint:
    """Same flow-matching loop as stage 1, with mask-free conditioning and
    the loss over all frames. Weights start from the stage-1 checkpoint."""
    config = model_config_from_meta(init.meta)
    online = callable(pair_source)
    if not online and len(pair_source) == 0:
        raise ValueError("empty pair source")
    params = init.params()
    state = adamw_init(params)
    rng = np.random.default_rng(cfg.seed)
    log_rows = ["step,loss,lr"]
    t0 = time.time()
    for step in range(cfg.steps):
        lr = cosine_warmup_lr(step, cfg.base_lr, cfg.warmup, cfg.steps)
        if online:
            pair = pair_source(rng)
        else:
            pair = pair_source[int(rng.integers(len(pair_source)))]
        t_pair = pair.x_gt.frames.shape[0]
        win = min(cfg.tgt_len, t_pair)
        start = int(rng.integers(t_pair - win + 1))
        frame_offset = int(rng.integers(config.t_max - win + 1))
        template, x_1 = build_maskfree_condition(pair, start, win,
                                                 frame_offset)
        t = sample_t(rng, cfg.t_power)
        x_0 = rng.standard_normal(x_1.shape).astype(np.float32)
        loss_mask = np.ones_like(x_1)
        with T.graph():
            feats = encode_window_audio(pair.a_gt, start, win, params, config)
            loss = fm_loss(params, template, x_1, feats, t, x_0, loss_mask,
                           config)
            gmap = T.backward(loss)
        grads = collect_grads(params, gmap)
        clip_global_norm(grads, cfg.clip_norm)
        adamw_step(params, grads, state,
                   AdamWConfig(lr=lr, weight_decay=cfg.weight_decay))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log_rows.append(f"{step},{loss.item():.6f},{lr:.8f}")
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("\n".join(log_rows) + "\n")
    meta = dict(init.meta)
    meta.update({"stage": "2", "stage2.steps": str(cfg.steps),
                 "stage2.seed": str(cfg.seed),
                 "stage2.wall_s": f"{time.time() - t0:.1f}"})
    tensors = {k: Tensor(v.data.copy()) for k, v in params.items()}
    return Checkpoint(tensors=tensors, meta=meta)


def infer_lipsync(stage2: Checkpoint, source: VideoClip,
                  new_audio: AudioTrack,
                  sample_cfg: SampleConfig) -> VideoClip:
    """Single-pass mask-free dub: source frames ride in on the y channel
    (artifact-free at inference), the new audio drives the mouth, and the
    sequence length is exactly the clip length."""
    t_frames = source.frames.shape[0]
    if new_audio.frame_count != t_frames:
        raise ValueError(f"audio frames {new_audio.frame_count} != clip "
                         f"frames {t_frames}")
    config = model_config_from_meta(stage2.meta)
    params = {n: Tensor(v.data) for n, v in stage2.tensors.items()}
    template = CondTemplate(m=np.ones_like(source.frames),
                            y=source.frames.copy(), n_ref=0,
                            frame_indices=np.arange(t_frames))
    feats = causal_encode(new_audio, params, config.audio_window)
    return ode_sample(params, config, template, feats, sample_cfg)
