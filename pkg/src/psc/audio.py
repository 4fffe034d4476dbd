"""Causal per-frame audio encoder.

Each video frame gets one feature vector computed by a two-layer MLP over
the raw samples of the last `window` frames (zero-padded at the left
edge), so feature t can never see a sample after frame t.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .world import AudioTrack

AUDIO_WINDOW = 2  # frames per feature


def audio_windows(audio: AudioTrack, window: int = AUDIO_WINDOW) -> np.ndarray:
    """(T, window*r) matrix of causal sample windows, zero-padded left."""
    t_frames, r = audio.frame_count, audio.r
    padded = np.concatenate(
        [np.zeros((window - 1) * r, dtype=np.float32), audio.samples])
    out = np.zeros((t_frames, window * r), dtype=np.float32)
    for t in range(t_frames):
        out[t] = padded[t * r:(t + window) * r]
    return out


def causal_encode(audio: AudioTrack, params: dict[str, Tensor],
                  window: int = AUDIO_WINDOW) -> Tensor:
    """Encode to (T, D_a). Gradients flow to the audio_enc.* parameters."""
    wins = Tensor(audio_windows(audio, window))
    if wins.shape[1] != params["audio_enc.w1"].shape[0]:
        raise ValueError(
            f"audio window size {wins.shape[1]} does not match encoder "
            f"input {params['audio_enc.w1'].shape[0]}")
    h = T.gelu(T.add_row(T.matmul(wins, params["audio_enc.w1"]),
                         params["audio_enc.b1"]))
    return T.add_row(T.matmul(h, params["audio_enc.w2"]),
                     params["audio_enc.b2"])


def pretrain_audio_encoder(params: dict[str, Tensor], r: int,
                           window: int = AUDIO_WINDOW, seed: int = 0,
                           steps: int = 400, batch: int = 32,
                           lr: float = 1e-3) -> float:
    """Warm-start the encoder on an energy pretext task: regress each
    window's own mean absolute amplitude through a throwaway linear head.

    This is the desk-scale stand-in for a pretrained speech front-end:
    trained jointly from scratch inside the flow-matching objective, the
    encoder's energy sensitivity emerges far too slowly for lip sync to
    couple at all. The pretext uses only the raw audio (no lip law), is
    deterministic in `seed`, and the encoder stays trainable afterwards.
    Returns the final pretext loss.
    """
    from importlib import import_module

    from .optim import AdamWConfig, adamw_init, adamw_step
    world = import_module("psc.world")

    names = ["audio_enc.w1", "audio_enc.b1", "audio_enc.w2", "audio_enc.b2"]
    d_a = params["audio_enc.w2"].shape[1]
    rng = np.random.default_rng(seed)
    head = Tensor(rng.normal(0, 0.1, size=(d_a, 1)).astype(np.float32),
                  requires_grad=True)
    head_b = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    trained = {n: params[n] for n in names}
    trained["head.w"] = head
    trained["head.b"] = head_b
    state = adamw_init(trained)
    loss_val = 0.0
    frames_per_track = 16
    for step in range(steps):
        wins = np.zeros((batch, window * r), dtype=np.float32)
        for i in range(0, batch, frames_per_track):
            audio = world.synth_audio(frames_per_track, r,
                                      int(rng.integers(2 ** 62)))
            rows = audio_windows(audio, window)
            take = min(frames_per_track, batch - i)
            wins[i:i + take] = rows[:take]
        target = np.abs(wins).mean(axis=1, keepdims=True)
        with T.graph():
            x = Tensor(wins)
            h = T.gelu(T.add_row(T.matmul(x, trained["audio_enc.w1"]),
                                 trained["audio_enc.b1"]))
            f = T.add_row(T.matmul(h, trained["audio_enc.w2"]),
                          trained["audio_enc.b2"])
            # read through the same per-frame normalization the model
            # applies, so the energy signal lands in directions that
            # survive it (a channel-mean shift would be erased)
            pred = T.add_row(T.matmul(T.layernorm(f), trained["head.w"]),
                             trained["head.b"])
            diff = T.sub(pred, Tensor(target))
            loss = T.scalar_mul(T.sum_sq(diff), 1.0 / batch)
            gmap = T.backward(loss)
        grads = {}
        for n, p in trained.items():
            if p.node_id is not None and p.node_id in gmap:
                grads[n] = gmap[p.node_id]
            else:
                grads[n] = Tensor(np.zeros_like(p.data))
        adamw_step(trained, grads, state,
                   AdamWConfig(lr=lr, weight_decay=0.0))
        loss_val = loss.item()
    return loss_val
