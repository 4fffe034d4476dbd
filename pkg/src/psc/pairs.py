"""Pseudo-paired data generation: synthesize a mouth-altered clip with the
few-step student driven by independently drawn audio, parse both clips
into face masks, take their union, and composite the pristine background
back in. Outside the union mask the synthetic clip is bit-identical to
the source; inside it, the student's output is kept untouched (boundary
artifacts included) because the restoration stage trains on them.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, model_config_from_meta
from .sampling import SampleConfig, inpaint_dub
from .tensor import Tensor
from .world import (AudioTrack, Mask, SceneRecord, VideoClip,
                    analytic_face_mask, dequantize_frames, quantize_frames,
                    synth_audio)

PSCP_MAGIC = b"PSCP"
PSCP_VERSION = 1

GEN_PARSER_DILATION = 1  # parser radius on synthesized frames
GT_PARSER_DILATION = 0   # parser radius on ground-truth frames


@dataclass
class PseudoPair:
    x_gt: VideoClip
    x_gen: VideoClip
    a_rand: AudioTrack
    a_gt: AudioTrack
    m_face: Mask
    scene_id: int
    seed: int


def union_mask(m1: Mask, m2: Mask) -> Mask:
    if m1.values.shape != m2.values.shape:
        raise ValueError(f"union_mask: {m1.values.shape} vs {m2.values.shape}")
    return Mask(np.maximum(m1.values, m2.values))


def composite(x_prime_gen: VideoClip, x_gt: VideoClip,
              m_face: Mask) -> VideoClip:
    """Per-pixel select: generated pixels inside the mask, source pixels
    outside. Exact, no blending."""
    if x_prime_gen.frames.shape != x_gt.frames.shape \
            or x_gt.frames.shape != m_face.values.shape:
        raise ValueError(
            f"composite: {x_prime_gen.frames.shape} vs {x_gt.frames.shape} "
            f"vs {m_face.values.shape}")
    mv = m_face.values
    return VideoClip(mv * x_prime_gen.frames + (1.0 - mv) * x_gt.frames)


def generate_pair(scene: SceneRecord, student: Checkpoint,
                  rng: np.random.Generator, k_steps: int | None = None,
                  scheme: str = "euler") -> PseudoPair:
    """Algorithm: dub with random audio, parse both clips, union the masks,
    composite the pristine background."""
    config = model_config_from_meta(student.meta)
    params = {n: Tensor(v.data) for n, v in student.tensors.items()}
    if k_steps is None:
        k_steps = int(student.meta.get("student.k", 4))
    audio_seed = int(rng.integers(2 ** 62))
    noise_seed = int(rng.integers(2 ** 62))
    a_rand = synth_audio(scene.spec.t_frames, scene.audio.r, audio_seed)
    x_prime = inpaint_dub(scene, params, config, a_rand,
                          SampleConfig(steps=k_steps, scheme=scheme,
                                       seed=noise_seed))
    m_gen = analytic_face_mask(scene.spec, dilate=GEN_PARSER_DILATION)
    m_gt = analytic_face_mask(scene.spec, dilate=GT_PARSER_DILATION)
    m_face = union_mask(m_gen, m_gt)
    x_gen = composite(x_prime, scene.clip, m_face)
    return PseudoPair(x_gt=scene.clip, x_gen=x_gen, a_rand=a_rand,
                      a_gt=scene.audio, m_face=m_face,
                      scene_id=scene.scene_id, seed=audio_seed)


def online_pair_source(dataset: list[SceneRecord], student: Checkpoint,
                       scheme: str = "euler"):
    """On-demand pair generation for streaming straight into training."""
    def draw(rng: np.random.Generator) -> PseudoPair:
        scene = dataset[int(rng.integers(len(dataset)))]
        return generate_pair(scene, student, rng, scheme=scheme)
    return draw


def background_digest(clip: VideoClip, m_face: Mask) -> str:
    """Checksum of the quantized pixels outside the union mask; equal for
    x_gt and x_gen by construction."""
    outside = quantize_frames(clip.frames)[m_face.values == 0.0]
    return hashlib.sha256(outside.tobytes()).hexdigest()[:16]


# ------------------------------------------------------------------ corpus io


def write_pair_blob(path: Path, pair: PseudoPair):
    t, _, h, w = pair.x_gt.frames.shape
    buf = io.BytesIO()
    buf.write(PSCP_MAGIC)
    buf.write(struct.pack("<IIIII", PSCP_VERSION, t, h, w, pair.a_gt.r))
    buf.write(quantize_frames(pair.x_gt.frames).tobytes())
    buf.write(quantize_frames(pair.x_gen.frames).tobytes())
    buf.write(pair.a_gt.samples.astype("<f4").tobytes())
    buf.write(pair.a_rand.samples.astype("<f4").tobytes())
    buf.write(pair.m_face.values.astype(np.uint8).tobytes())
    path.write_bytes(buf.getvalue())


def read_pair_blob(path: Path, scene_id: int = -1,
                   seed: int = 0) -> PseudoPair:
    raw = path.read_bytes()
    if raw[:4] != PSCP_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, t, h, w, r = struct.unpack_from("<IIIII", raw, 4)
    if version != PSCP_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 24
    n_px = t * h * w
    x_gt = dequantize_frames(
        np.frombuffer(raw, np.uint8, n_px, off).reshape(t, 1, h, w))
    off += n_px
    x_gen = dequantize_frames(
        np.frombuffer(raw, np.uint8, n_px, off).reshape(t, 1, h, w))
    off += n_px
    a_gt = np.frombuffer(raw, "<f4", t * r, off).copy()
    off += 4 * t * r
    a_rand = np.frombuffer(raw, "<f4", t * r, off).copy()
    off += 4 * t * r
    m = np.frombuffer(raw, np.uint8, n_px, off).reshape(t, 1, h, w)
    return PseudoPair(x_gt=VideoClip(x_gt), x_gen=VideoClip(x_gen),
                      a_rand=AudioTrack(a_rand, r), a_gt=AudioTrack(a_gt, r),
                      m_face=Mask(m.astype(np.float32)), scene_id=scene_id,
                      seed=seed)


def build_corpus(dataset: list[SceneRecord], student: Checkpoint,
                 n_pairs: int, seed: int, out_dir: Path,
                 scheme: str = "euler") -> Path:
    """Materialize n_pairs pseudo-pairs (scenes cycled round-robin, fresh
    audio each time) with per-pair sidecars and a manifest."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(f"cannot create corpus dir {out_dir}: {e}") from e
    rng = np.random.default_rng(seed)
    lines = ["# psc pseudo-pair corpus", "format = pscp-v1",
             f"n_pairs = {n_pairs}", f"seed = {seed}"]
    for i in range(n_pairs):
        scene = dataset[i % len(dataset)]
        pair = generate_pair(scene, student, rng, scheme=scheme)
        blob = f"pair_{i:04d}.pscp"
        write_pair_blob(out_dir / blob, pair)
        digest_gt = background_digest(pair.x_gt, pair.m_face)
        digest_gen = background_digest(pair.x_gen, pair.m_face)
        if digest_gt != digest_gen:
            raise AssertionError(
                f"pair {i}: background digests differ ({digest_gt} vs "
                f"{digest_gen})")
        sidecar = [f"pair = {i}", f"scene = {scene.scene_id}",
                   f"audio_seed = {pair.seed}", f"blob = {blob}",
                   f"bg_digest = {digest_gt}"]
        (out_dir / f"pair_{i:04d}.txt").write_text("\n".join(sidecar) + "\n")
        lines += [f"[pair {i}]", f"scene = {scene.scene_id}", f"blob = {blob}",
                  f"bg_digest = {digest_gt}"]
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_corpus(path: Path) -> list[PseudoPair]:
    path = Path(path)
    manifest = path / "manifest.txt" if path.is_dir() else path
    if not manifest.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest}")
    root = manifest.parent
    pairs = []
    scene_id = -1
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if line.startswith("scene ="):
            scene_id = int(line.split("=")[1])
        if line.startswith("blob ="):
            blob = line.split("=")[1].strip()
            pairs.append(read_pair_blob(root / blob, scene_id=scene_id))
    return pairs
