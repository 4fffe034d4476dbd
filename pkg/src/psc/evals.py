"""Analytic evaluation: dub held-out scenes with fresh audio and score
lip sync, background fidelity, identity preservation, and cut robustness
against the world's closed-form ground truth.

Region conventions: background = outside the dilated face parse and
outside occluders; identity = inside the exact face disk but outside the
mouth box and occluders. The ring between the exact and dilated parses
belongs to neither region. Occluder pixels are scored separately
(occluder_error) since preserving them is its own claim.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, model_config_from_meta
from .sampling import SampleConfig, inpaint_dub
from .stage2 import infer_lipsync
from .tensor import Tensor
from .world import (SceneRecord, VideoClip, analytic_face_mask,
                    aperture_series, measured_series, mouth_box_support,
                    occluder_support, synth_audio)

CSV_HEADER = "split,scene,sync_err,bg_err_mean,bg_err_max,id_err,cut_leak"


@dataclass
class SceneMetrics:
    split: str
    scene: int
    sync_err: float
    bg_err_mean: float
    bg_err_max: float
    id_err: float
    cut_leak: float


@dataclass
class MetricsReport:
    rows: list[SceneMetrics]

    @property
    def scene_count(self) -> int:
        return len(self.rows)

    def split_mean(self, metric: str, split: str | None = None) -> float:
        vals = [getattr(r, metric) for r in self.rows
                if split is None or r.split == split]
        if not vals:
            raise ValueError(f"no rows for split {split!r}")
        return float(np.mean(vals))

    def splits(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.split not in seen:
                seen.append(r.split)
        return seen


def worker_count() -> int:
    raw = os.environ.get("PSC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def dub_scene(ckpt: Checkpoint, scene: SceneRecord, audio,
              sample_cfg: SampleConfig) -> VideoClip:
    """Stage-aware dubbing: inpainting models take the whole clip as
    reference; the mask-free model conditions on it through y."""
    stage = ckpt.meta.get("stage", "1")
    if stage == "2":
        return infer_lipsync(ckpt, scene.clip, audio, sample_cfg)
    config = model_config_from_meta(ckpt.meta)
    params = {n: Tensor(v.data) for n, v in ckpt.tensors.items()}
    return inpaint_dub(scene, params, config, audio, sample_cfg)


def score_dub(out: VideoClip, scene: SceneRecord, fresh_audio,
              split: str) -> SceneMetrics:
    spec = scene.spec
    target_ap = aperture_series(fresh_audio)
    got_ap = measured_series(out, spec)
    sync_err = float(np.abs(got_ap - target_ap).mean())

    occ = occluder_support(spec) == 1.0
    face_wide = analytic_face_mask(spec, dilate=1).values == 1.0
    face_exact = analytic_face_mask(spec, dilate=0).values == 1.0
    box = mouth_box_support(spec) == 1.0
    bg_region = ~face_wide & ~occ
    id_region = face_exact & ~box & ~occ

    diff = np.abs(out.frames - scene.clip.frames)
    bg_err_mean = float(diff[bg_region].mean())
    bg_err_max = float(diff[bg_region].max())
    id_err = float(diff[id_region].mean())

    cut_leak = 0.0
    if len(spec.cut_frames):
        vals = []
        for c in spec.cut_frames:
            for t in (int(c), int(c) + 1):
                if t < spec.t_frames:
                    vals.append(diff[t][bg_region[t]].mean())
        cut_leak = float(np.mean(vals))
    return SceneMetrics(split=split, scene=scene.scene_id, sync_err=sync_err,
                        bg_err_mean=bg_err_mean, bg_err_max=bg_err_max,
                        id_err=id_err, cut_leak=cut_leak)


def occluder_error(out: VideoClip, scene: SceneRecord) -> float:
    """Mean abs diff on occluder pixels (0 when the scene has none)."""
    occ = occluder_support(scene.spec) == 1.0
    if not occ.any():
        return 0.0
    return float(np.abs(out.frames - scene.clip.frames)[occ].mean())


def fresh_audio_for(scene: SceneRecord, seed: int):
    mix = (seed * 1_000_003 + scene.scene_id * 7919 + 17) % (2 ** 62)
    return synth_audio(scene.spec.t_frames, scene.audio.r, mix)


def eval_model(ckpt: Checkpoint, eval_sets: dict[str, list[SceneRecord]],
               sample_cfg: SampleConfig, seed: int = 0) -> MetricsReport:
    """Dub every scene of every split with fresh audio and score it."""
    jobs = [(split, scene) for split, scenes in eval_sets.items()
            for scene in scenes]
    if not jobs:
        raise ValueError("empty eval set")

    def run(job):
        split, scene = job
        audio = fresh_audio_for(scene, seed)
        out = dub_scene(ckpt, scene, audio, sample_cfg)
        return score_dub(out, scene, audio, split)

    n = worker_count()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as ex:
            rows = list(ex.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]
    return MetricsReport(rows=rows)


def write_report(path: Path, report: MetricsReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER]
    for r in report.rows:
        lines.append(f"{r.split},{r.scene},{r.sync_err:.6f},"
                     f"{r.bg_err_mean:.6f},{r.bg_err_max:.6f},"
                     f"{r.id_err:.6f},{r.cut_leak:.6f}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_report(path: Path) -> MetricsReport:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected report header")
    rows = []
    for line in lines[1:]:
        if not line.strip():
            continue
        split, scene, *vals = line.split(",")
        sync, bgm, bgx, ide, cut = (float(v) for v in vals)
        rows.append(SceneMetrics(split=split, scene=int(scene), sync_err=sync,
                                 bg_err_mean=bgm, bg_err_max=bgx, id_err=ide,
                                 cut_leak=cut))
    return MetricsReport(rows=rows)
