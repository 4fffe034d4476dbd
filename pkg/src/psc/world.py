"""Procedural talking-face world with analytically known ground truth.

Every scene is a deterministic function of (seed, distribution config):
a gray face disk with eyes drifts over a structured background, a dark
mouth rectangle opens proportionally to a causal function of the audio,
optional occluders pass over the upper face, and optional hard cuts
re-randomize the layout mid-clip. Because the audio-to-mouth law and all
geometry are closed form, the world doubles as its own face parser and
as the measurement oracle for lip-sync error.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import binary_dilation

# Rendered intensities. The mouth must sit well below DARK_THRESHOLD and
# the face well above it or the aperture measurement loses its meaning.
FACE_GRAY = 0.7
EYE_GRAY = 0.2
MOUTH_GRAY = 0.08
DARK_THRESHOLD = 0.35

APERTURE_WINDOW = 3  # frames, causal
APERTURE_GAIN = 2.0

PSCD_MAGIC = b"PSCD"
PSCD_VERSION = 1


@dataclass
class AudioTrack:
    """Raw mono samples, r per video frame, values in [-1, 1]."""
    samples: np.ndarray
    r: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size % self.r != 0:
            raise ValueError(
                f"audio length {self.samples.size} not divisible by r={self.r}")

    @property
    def frame_count(self) -> int:
        return self.samples.size // self.r


@dataclass
class VideoClip:
    """(T, 1, H, W) f32 frames in [0, 1]; fps is metadata only."""
    frames: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[1] != 1:
            raise ValueError(f"clip shape {self.frames.shape} is not (T,1,H,W)")


@dataclass
class Mask:
    """(T, 1, H, W) binary f32 values."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        uniq = np.unique(self.values)
        if not np.all(np.isin(uniq, [0.0, 1.0])):
            raise ValueError("mask is not binary")


@dataclass
class Occluder:
    path: np.ndarray          # (T, 2) int: top, left
    height: int
    width: int
    intensity: float


@dataclass
class SceneSpec:
    """Fully resolved per-frame layout of one scene. Built from a seed;
    the seed (not the arrays) is what gets persisted."""
    seed: int
    t_frames: int
    h: int
    w: int
    face_center: np.ndarray   # (T, 2) int: cy, cx
    face_radius: int
    mouth_box: np.ndarray     # (T, 4) int: top, left, height, width
    mouth_max_open: int
    background_kind: str      # static | drifting-stripes | flashing-blocks
    background_speed: float
    bg_phase: np.ndarray      # (T,) float
    stripe_period: int
    flash_cells: Optional[np.ndarray]  # (gh, gw, 2) float, flashing-blocks only
    block_px: int
    occluder: Optional[Occluder]
    cut_frames: np.ndarray    # sorted int, all in [1, T-1]


@dataclass
class DatasetConfig:
    """Distribution the scene generator draws from."""
    t_frames: int = 16
    h: int = 32
    w: int = 32
    r: int = 64
    face_radius: int = 10
    mouth_w: int = 8
    mouth_max_open: int = 6
    occluder_frac: float = 0.0
    cut_frac: float = 0.0
    frac_static: float = 1.0
    frac_drift: float = 0.0
    frac_flash: float = 0.0
    drift_speed_lo: float = 0.5
    drift_speed_hi: float = 2.0
    flash_rate_lo: float = 0.5
    flash_rate_hi: float = 1.0
    block_px: int = 4


@dataclass
class SceneRecord:
    scene_id: int
    seed: int
    audio_seed: int
    spec: SceneSpec
    clip: VideoClip
    audio: AudioTrack


# ------------------------------------------------------------------ audio


def synth_audio(t_frames: int, r: int, seed: int) -> AudioTrack:
    """Band-limited noise under a piecewise-constant amplitude envelope
    (segments of 2-6 frames, some silent), so apertures traverse varied
    trajectories including fully closed stretches."""
    rng = np.random.default_rng(seed)
    env = np.zeros(t_frames, dtype=np.float64)
    t = 0
    while t < t_frames:
        seg = int(rng.integers(2, 7))
        level = 0.0 if rng.random() < 0.2 else float(rng.uniform(0.12, 1.0))
        env[t:t + seg] = level
        t += seg
    white = rng.normal(size=t_frames * r)
    kernel = np.ones(6) / 6.0
    carrier = np.convolve(white, kernel, mode="same")
    carrier = carrier.reshape(t_frames, r)
    peak = np.abs(carrier).max(axis=1, keepdims=True)
    carrier = carrier / np.maximum(peak, 1e-9) * 0.999
    samples = (carrier * env[:, None]).reshape(-1)
    return AudioTrack(samples.astype(np.float32), r)


def mouth_aperture(audio: AudioTrack, t: int) -> float:
    """Ground-truth audio-to-lip law: clamp(gain * mean |samples| over the
    causal window of the last APERTURE_WINDOW frames)."""
    if not 0 <= t < audio.frame_count:
        raise ValueError(f"frame {t} outside [0, {audio.frame_count})")
    lo = max(0, t - APERTURE_WINDOW + 1)
    seg = audio.samples[lo * audio.r:(t + 1) * audio.r]
    return float(np.clip(APERTURE_GAIN * np.abs(seg).mean(), 0.0, 1.0))


def aperture_series(audio: AudioTrack) -> np.ndarray:
    return np.array([mouth_aperture(audio, t)
                     for t in range(audio.frame_count)], dtype=np.float32)


# ------------------------------------------------------------------ scenes


def _segment_bounds(t_frames: int, cut_frames: np.ndarray) -> list[tuple[int, int]]:
    edges = [0] + [int(c) for c in cut_frames] + [t_frames]
    return [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)]


def build_scene_spec(cfg: DatasetConfig, seed: int) -> SceneSpec:
    """Draw one scene. All randomness comes from `seed`; cuts re-randomize
    face position, mouth box, and background phase while keeping sizes."""
    rng = np.random.default_rng(seed)
    t_frames, h, w, r_face = cfg.t_frames, cfg.h, cfg.w, cfg.face_radius

    kind_draw = rng.random()
    if kind_draw < cfg.frac_static:
        kind, speed = "static", 0.0
    elif kind_draw < cfg.frac_static + cfg.frac_drift:
        kind = "drifting-stripes"
        speed = float(rng.uniform(cfg.drift_speed_lo, cfg.drift_speed_hi))
    else:
        kind = "flashing-blocks"
        speed = float(rng.uniform(cfg.flash_rate_lo, cfg.flash_rate_hi))

    has_occluder = rng.random() < cfg.occluder_frac
    has_cuts = rng.random() < cfg.cut_frac
    if has_cuts and t_frames >= 4:
        n_cuts = 1 if t_frames < 12 or rng.random() < 0.6 else 2
        cuts = np.sort(rng.choice(np.arange(1, t_frames), size=n_cuts,
                                  replace=False)).astype(np.int64)
    else:
        cuts = np.zeros(0, dtype=np.int64)

    cy_lo, cy_hi = r_face + 1, h - 2 - r_face
    cx_lo, cx_hi = r_face + 1, w - 2 - r_face
    face_center = np.zeros((t_frames, 2), dtype=np.int64)
    bg_phase = np.zeros(t_frames, dtype=np.float64)
    stripe_period = int(rng.integers(6, 11))

    for seg_lo, seg_hi in _segment_bounds(t_frames, cuts):
        c0y = rng.uniform(cy_lo, cy_hi)
        c0x = rng.uniform(cx_lo, cx_hi)
        amp_y = rng.uniform(0.0, 2.5)
        amp_x = rng.uniform(0.0, 2.5)
        freq = rng.uniform(0.02, 0.12)
        ph_y, ph_x = rng.uniform(0, 1, size=2)
        tt = np.arange(seg_hi - seg_lo)
        cy = c0y + amp_y * np.sin(2 * np.pi * (freq * tt + ph_y))
        cx = c0x + amp_x * np.sin(2 * np.pi * (freq * tt + ph_x))
        face_center[seg_lo:seg_hi, 0] = np.clip(np.rint(cy), cy_lo, cy_hi)
        face_center[seg_lo:seg_hi, 1] = np.clip(np.rint(cx), cx_lo, cx_hi)
        phase0 = rng.uniform(0.0, stripe_period) if kind != "flashing-blocks" \
            else rng.uniform(0.0, 2.0)
        bg_phase[seg_lo:seg_hi] = phase0 + speed * tt

    mouth_box = np.zeros((t_frames, 4), dtype=np.int64)
    mouth_box[:, 0] = face_center[:, 0] + 2
    mouth_box[:, 1] = face_center[:, 1] - cfg.mouth_w // 2
    mouth_box[:, 2] = cfg.mouth_max_open
    mouth_box[:, 3] = cfg.mouth_w

    flash_cells = None
    if kind == "flashing-blocks":
        gh = -(-h // cfg.block_px)
        gw = -(-w // cfg.block_px)
        flash_cells = rng.uniform(0.1, 0.6, size=(gh, gw, 2))

    occluder = None
    if has_occluder:
        oh = int(rng.integers(4, 9))
        ow = int(rng.integers(3, 7))
        path = np.zeros((t_frames, 2), dtype=np.int64)
        for seg_lo, seg_hi in _segment_bounds(t_frames, cuts):
            cy0 = face_center[seg_lo, 0]
            top_hi = int(mouth_box[seg_lo:seg_hi, 0].min()) - oh - 1
            top_lo = max(0, cy0 - r_face - 2)
            top = int(rng.integers(top_lo, max(top_lo + 1, top_hi)))
            left0 = rng.uniform(0, w - ow)
            drift = rng.uniform(-1.5, 1.5)
            tt = np.arange(seg_hi - seg_lo)
            path[seg_lo:seg_hi, 0] = top
            path[seg_lo:seg_hi, 1] = np.clip(
                np.rint(left0 + drift * tt), 0, w - ow)
        occluder = Occluder(path=path, height=oh, width=ow,
                            intensity=float(rng.uniform(0.85, 0.98)))

    spec = SceneSpec(
        seed=seed, t_frames=t_frames, h=h, w=w,
        face_center=face_center, face_radius=r_face,
        mouth_box=mouth_box, mouth_max_open=cfg.mouth_max_open,
        background_kind=kind, background_speed=speed, bg_phase=bg_phase,
        stripe_period=stripe_period, flash_cells=flash_cells,
        block_px=cfg.block_px, occluder=occluder, cut_frames=cuts)
    validate_scene_spec(spec)
    return spec


def validate_scene_spec(spec: SceneSpec):
    r = spec.face_radius
    cy, cx = spec.face_center[:, 0], spec.face_center[:, 1]
    if not (np.all(cy >= r + 1) and np.all(cy <= spec.h - 2 - r)
            and np.all(cx >= r + 1) and np.all(cx <= spec.w - 2 - r)):
        raise ValueError("face disk leaves the frame")
    top, left = spec.mouth_box[:, 0], spec.mouth_box[:, 1]
    bot, right = top + spec.mouth_box[:, 2], left + spec.mouth_box[:, 3]
    if not (np.all(top >= cy - r) and np.all(bot <= cy + r + 1)
            and np.all(left >= cx - r) and np.all(right <= cx + r + 1)):
        raise ValueError("mouth box outside the face bounding region")
    cuts = spec.cut_frames
    if cuts.size and not (np.all(np.diff(cuts) > 0)
                          and cuts[0] >= 1 and cuts[-1] <= spec.t_frames - 1):
        raise ValueError("cut frames not strictly increasing in [1, T-1]")


# ------------------------------------------------------------------ render


def _background_frame(spec: SceneSpec, t: int) -> np.ndarray:
    h, w = spec.h, spec.w
    if spec.background_kind in ("static", "drifting-stripes"):
        x = np.arange(w, dtype=np.float64)
        row = 0.15 + 0.45 * 0.5 * (
            1 + np.sin(2 * np.pi * (x + spec.bg_phase[t]) / spec.stripe_period))
        return np.broadcast_to(row, (h, w)).astype(np.float32)
    state = int(np.floor(spec.bg_phase[t])) % 2
    cells = spec.flash_cells[:, :, state]
    big = np.repeat(np.repeat(cells, spec.block_px, 0), spec.block_px, 1)
    return big[:h, :w].astype(np.float32)


def _disk(h: int, w: int, cy: int, cx: int, radius: float) -> np.ndarray:
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius


def render_scene(spec: SceneSpec, audio: AudioTrack) -> VideoClip:
    """Deterministic render; frames up to t depend only on samples up to t."""
    if audio.frame_count != spec.t_frames:
        raise ValueError(f"audio frames {audio.frame_count} != T {spec.t_frames}")
    frames = np.zeros((spec.t_frames, 1, spec.h, spec.w), dtype=np.float32)
    for t in range(spec.t_frames):
        img = _background_frame(spec, t).copy()
        cy, cx = spec.face_center[t]
        img[_disk(spec.h, spec.w, cy, cx, spec.face_radius)] = FACE_GRAY
        for ex in (cx - 3, cx + 3):
            img[_disk(spec.h, spec.w, cy - 3, ex, 1.0)] = EYE_GRAY
        a = mouth_aperture(audio, t)
        mh = int(round(a * spec.mouth_max_open))
        top, left, _, mw = spec.mouth_box[t]
        if mh > 0:
            img[top:top + mh, left:left + mw] = MOUTH_GRAY
        occ = spec.occluder
        if occ is not None:
            oy, ox = occ.path[t]
            img[oy:oy + occ.height, ox:ox + occ.width] = occ.intensity
        frames[t, 0] = img
    return VideoClip(frames)


def occluder_support(spec: SceneSpec) -> np.ndarray:
    """(T,1,H,W) binary array of occluder pixels (zeros when none)."""
    out = np.zeros((spec.t_frames, 1, spec.h, spec.w), dtype=np.float32)
    occ = spec.occluder
    if occ is not None:
        for t in range(spec.t_frames):
            oy, ox = occ.path[t]
            out[t, 0, oy:oy + occ.height, ox:ox + occ.width] = 1.0
    return out


def analytic_face_mask(spec: SceneSpec, dilate: int = 0) -> Mask:
    """The world's stand-in face parser: the face-disk support, dilated by
    `dilate` pixels (conventionally 1 when parsing generated frames, 0 on
    ground truth). Occluders are background-layer objects and stay 0."""
    vals = np.zeros((spec.t_frames, 1, spec.h, spec.w), dtype=np.float32)
    occ = occluder_support(spec)
    for t in range(spec.t_frames):
        cy, cx = spec.face_center[t]
        disk = _disk(spec.h, spec.w, cy, cx, spec.face_radius)
        if dilate > 0:
            disk = binary_dilation(disk, structure=np.ones((3, 3), bool),
                                   iterations=dilate)
        vals[t, 0] = disk
    vals[occ == 1.0] = 0.0
    return Mask(vals)


def mouth_box_support(spec: SceneSpec) -> np.ndarray:
    out = np.zeros((spec.t_frames, 1, spec.h, spec.w), dtype=np.float32)
    for t in range(spec.t_frames):
        top, left, bh, bw = spec.mouth_box[t]
        out[t, 0, top:top + bh, left:left + bw] = 1.0
    return out


def measure_aperture(clip: VideoClip, spec: SceneSpec, t: int) -> float:
    """Desk-scale lip-sync measurement: fraction of mouth-box pixels darker
    than DARK_THRESHOLD, normalized to the box width times max opening."""
    top, left, bh, bw = spec.mouth_box[t]
    region = clip.frames[t, 0, top:top + bh, left:left + bw]
    dark = int((region < DARK_THRESHOLD).sum())
    return float(np.clip(dark / (bw * spec.mouth_max_open), 0.0, 1.0))


def measured_series(clip: VideoClip, spec: SceneSpec) -> np.ndarray:
    return np.array([measure_aperture(clip, spec, t)
                     for t in range(spec.t_frames)], dtype=np.float32)


# ------------------------------------------------------------------ dataset io


def quantize_frames(frames: np.ndarray) -> np.ndarray:
    return np.rint(frames * 255.0).astype(np.uint8)


def dequantize_frames(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 255.0).astype(np.float32)


def write_scene_blob(path: Path, clip: VideoClip, audio: AudioTrack) -> tuple[int, int]:
    """PSCD blob: magic, version, T/H/W/r, u8 frames, f32 LE audio.
    Returns (frames_offset, audio_offset)."""
    t, _, h, w = clip.frames.shape
    buf = io.BytesIO()
    buf.write(PSCD_MAGIC)
    buf.write(struct.pack("<IIIII", PSCD_VERSION, t, h, w, audio.r))
    frames_off = buf.tell()
    buf.write(quantize_frames(clip.frames).tobytes())
    audio_off = buf.tell()
    buf.write(audio.samples.astype("<f4").tobytes())
    path.write_bytes(buf.getvalue())
    return frames_off, audio_off


def read_scene_blob(path: Path) -> tuple[VideoClip, AudioTrack]:
    raw = path.read_bytes()
    if raw[:4] != PSCD_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, t, h, w, r = struct.unpack_from("<IIIII", raw, 4)
    if version != PSCD_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 4 + 20
    n_px = t * h * w
    frames = np.frombuffer(raw, dtype=np.uint8, count=n_px, offset=off)
    frames = dequantize_frames(frames.reshape(t, 1, h, w))
    audio = np.frombuffer(raw, dtype="<f4", count=t * r, offset=off + n_px)
    return VideoClip(frames), AudioTrack(audio.copy(), r)


def _cfg_lines(cfg: DatasetConfig) -> list[str]:
    return [f"cfg.{k} = {getattr(cfg, k)}" for k in (
        "t_frames", "h", "w", "r", "face_radius", "mouth_w", "mouth_max_open",
        "occluder_frac", "cut_frac", "frac_static", "frac_drift", "frac_flash",
        "drift_speed_lo", "drift_speed_hi", "flash_rate_lo", "flash_rate_hi",
        "block_px")]


def _cfg_from_lines(kv: dict[str, str]) -> DatasetConfig:
    cfg = DatasetConfig()
    for k in list(vars(cfg)):
        raw = kv[f"cfg.{k}"]
        cur = getattr(cfg, k)
        setattr(cfg, k, type(cur)(float(raw)) if isinstance(cur, (int, float))
                else raw)
    return cfg


def make_dataset(n_scenes: int, cfg: DatasetConfig, seed: int,
                 out_dir: Path) -> Path:
    """Render n_scenes deterministic scenes and write manifest + blobs."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(f"cannot create dataset dir {out_dir}: {e}") from e
    ss = np.random.SeedSequence(seed)
    scene_seeds = ss.spawn(n_scenes)
    lines = ["# psc dataset manifest", "format = pscd-v1",
             f"n_scenes = {n_scenes}", f"seed = {seed}"]
    lines += _cfg_lines(cfg)
    for i, child in enumerate(scene_seeds):
        s_scene, s_audio = (int(x.generate_state(1)[0]) for x in child.spawn(2))
        spec = build_scene_spec(cfg, s_scene)
        audio = synth_audio(cfg.t_frames, cfg.r, s_audio)
        clip = render_scene(spec, audio)
        blob = f"scene_{i:04d}.pscd"
        f_off, a_off = write_scene_blob(out_dir / blob, clip, audio)
        lines += [f"[scene {i}]", f"seed = {s_scene}", f"audio_seed = {s_audio}",
                  f"blob = {blob}", f"frames_offset = {f_off}",
                  f"audio_offset = {a_off}",
                  f"background = {spec.background_kind}",
                  f"occluder = {int(spec.occluder is not None)}",
                  "cut_frames = " + ",".join(str(c) for c in spec.cut_frames)]
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(path: Path) -> list[SceneRecord]:
    path = Path(path)
    manifest = path / "manifest.txt" if path.is_dir() else path
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    root = manifest.parent
    header: dict[str, str] = {}
    scenes: list[dict[str, str]] = []
    current = header
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[scene"):
            scenes.append({})
            current = scenes[-1]
            continue
        key, _, value = line.partition("=")
        current[key.strip()] = value.strip()
    cfg = _cfg_from_lines(header)
    records = []
    for i, sc in enumerate(scenes):
        spec = build_scene_spec(cfg, int(sc["seed"]))
        clip, audio = read_scene_blob(root / sc["blob"])
        records.append(SceneRecord(scene_id=i, seed=int(sc["seed"]),
                                   audio_seed=int(sc["audio_seed"]),
                                   spec=spec, clip=clip, audio=audio))
    return records
