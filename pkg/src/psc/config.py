"""Flat key = value experiment configuration with dotted sections.

Parsing and validation both report the offending line number, which the
CLI maps to exit code 2. Every key has a default; unknown keys and
duplicates are errors (they are always typos).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .model import DiTConfig
from .sampling import DistillConfig, SampleConfig
from .stage1 import TrainConfig
from .world import DatasetConfig


class ConfigError(ValueError):
    pass


def _bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# key -> (converter, default)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 1234),
    "world.h": (int, 32),
    "world.w": (int, 32),
    "world.r": (int, 64),
    "world.face_radius": (int, 10),
    "world.mouth_w": (int, 8),
    "world.mouth_max_open": (int, 6),
    "data.train_scenes": (int, 64),
    "data.train_t": (int, 24),
    "data.heldout_scenes": (int, 16),
    "data.heldout_t": (int, 24),
    "data.pairs_scenes": (int, 48),
    "data.pairs_t": (int, 8),
    "data.eval_scenes": (int, 8),
    "data.eval_t": (int, 16),
    "data.train_occluder_frac": (float, 0.3),
    "data.train_cut_frac": (float, 0.3),
    "data.train_frac_static": (float, 0.34),
    "data.train_frac_drift": (float, 0.33),
    "data.train_frac_flash": (float, 0.33),
    "model.depth": (int, 4),
    "model.dim": (int, 64),
    "model.heads": (int, 4),
    "model.patch": (int, 4),
    "model.audio_dim": (int, 32),
    "model.audio_hidden": (int, 64),
    "model.t_max": (int, 24),
    "train1.steps": (int, 2200),
    "train1.base_lr": (float, 2e-4),
    "train1.warmup": (int, 110),
    "train1.ref_len": (int, 8),
    "train1.tgt_len": (int, 8),
    "train1.batch_size": (int, 1),
    "train1.loss_all_frames": (_bool, False),
    "distill.teacher_steps": (int, 32),
    "distill.steps": (int, 60),
    "distill.bank": (int, 24),
    "distill.lr": (float, 1e-4),
    "distill.data_k": (int, 4),
    "pairs.n_pairs": (int, 240),
    "pairs.holdout": (int, 40),
    "train2.steps": (int, 1500),
    "train2.base_lr": (float, 2e-4),
    "train2.warmup": (int, 75),
    "sample.eval_steps": (int, 16),
    "sample.scheme": (str, "euler"),
}

EVAL_SPLITS = ("plain", "occluded", "scene-cut", "rapid-background")


@dataclass
class ExperimentConfig:
    values: dict[str, object]
    lines: dict[str, int] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def _where(self, key: str) -> str:
        if key in self.lines:
            return f"line {self.lines[key]}"
        return f"default for {key!r}"

    def validate(self):
        v = self.values

        def fail(key, msg):
            raise ConfigError(f"{self._where(key)}: {key}: {msg}")

        if v["world.h"] % v["model.patch"] or v["world.w"] % v["model.patch"]:
            fail("model.patch", f"frame {v['world.h']}x{v['world.w']} not "
                 f"divisible by patch {v['model.patch']}")
        if v["model.dim"] % v["model.heads"]:
            fail("model.heads", f"dim {v['model.dim']} not divisible by "
                 f"heads {v['model.heads']}")
        for side in ("world.h", "world.w"):
            if v[side] < 2 * v["world.face_radius"] + 3:
                fail(side, f"{v[side]} px cannot contain a face of radius "
                     f"{v['world.face_radius']}")
        if v["world.mouth_max_open"] > v["world.face_radius"] - 1:
            fail("world.mouth_max_open", "mouth taller than the lower face")
        if v["world.mouth_w"] // 2 + 2 > v["world.face_radius"] + 1:
            fail("world.mouth_w", "mask rectangle wider than the frame margin")
        for stage in ("train1", "train2"):
            if v[f"{stage}.steps"] > 0 and \
                    v[f"{stage}.warmup"] >= v[f"{stage}.steps"]:
                fail(f"{stage}.warmup", "warmup must be below total steps")
        need = v["train1.ref_len"] + v["train1.tgt_len"] + 1
        if v["data.train_t"] < need:
            fail("data.train_t", f"must be >= ref+tgt+1 = {need}")
        if v["data.heldout_t"] < need:
            fail("data.heldout_t", f"must be >= ref+tgt+1 = {need}")
        t_max = v["model.t_max"]
        for key in ("data.train_t", "data.heldout_t", "data.pairs_t",
                    "data.eval_t"):
            if v[key] > t_max:
                fail(key, f"exceeds model.t_max = {t_max}")
        fracs = [v[f"data.train_frac_{k}"] for k in ("static", "drift",
                                                     "flash")]
        if any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-6:
            fail("data.train_frac_static", "background fractions must be "
                 "nonnegative and sum to 1")
        if v["distill.data_k"] >= v["distill.teacher_steps"]:
            fail("distill.data_k", "student steps must be below teacher steps")
        if v["sample.scheme"] not in ("euler", "heun"):
            fail("sample.scheme", f"unknown scheme {v['sample.scheme']!r}")
        if v["sample.eval_steps"] < 1:
            fail("sample.eval_steps", "must be >= 1")
        for key in ("data.train_scenes", "data.heldout_scenes",
                    "data.pairs_scenes", "data.eval_scenes", "pairs.n_pairs"):
            if v[key] < 0 or (key != "pairs.n_pairs" and v[key] == 0):
                fail(key, "must be positive")
        if v["pairs.holdout"] < 0 or \
                (v["pairs.n_pairs"] > 0
                 and v["pairs.holdout"] >= v["pairs.n_pairs"]):
            fail("pairs.holdout", "must leave at least one training pair")

    # ------------------------------------------------------ typed views

    def _world_kwargs(self) -> dict:
        v = self.values
        return dict(h=v["world.h"], w=v["world.w"], r=v["world.r"],
                    face_radius=v["world.face_radius"],
                    mouth_w=v["world.mouth_w"],
                    mouth_max_open=v["world.mouth_max_open"])

    def train_world(self, t_key: str) -> DatasetConfig:
        v = self.values
        return DatasetConfig(
            t_frames=v[t_key], occluder_frac=v["data.train_occluder_frac"],
            cut_frac=v["data.train_cut_frac"],
            frac_static=v["data.train_frac_static"],
            frac_drift=v["data.train_frac_drift"],
            frac_flash=v["data.train_frac_flash"], **self._world_kwargs())

    def eval_world(self, split: str) -> DatasetConfig:
        v = self.values
        kw = dict(t_frames=v["data.eval_t"], **self._world_kwargs())
        if split == "plain":
            return DatasetConfig(frac_static=1.0, frac_drift=0.0,
                                 frac_flash=0.0, **kw)
        if split == "occluded":
            return DatasetConfig(occluder_frac=1.0, frac_static=0.0,
                                 frac_drift=1.0, frac_flash=0.0, **kw)
        if split == "scene-cut":
            return DatasetConfig(cut_frac=1.0, frac_static=0.0,
                                 frac_drift=1.0, frac_flash=0.0, **kw)
        if split == "rapid-background":
            return DatasetConfig(frac_static=0.0, frac_drift=0.0,
                                 frac_flash=1.0, flash_rate_lo=1.0,
                                 flash_rate_hi=1.0, **kw)
        raise ConfigError(f"unknown eval split {split!r}")

    def model_config(self) -> DiTConfig:
        v = self.values
        return DiTConfig(depth=v["model.depth"], dim=v["model.dim"],
                         heads=v["model.heads"], patch=v["model.patch"],
                         audio_dim=v["model.audio_dim"],
                         audio_hidden=v["model.audio_hidden"],
                         samples_per_frame=v["world.r"], h=v["world.h"],
                         w=v["world.w"], t_max=v["model.t_max"])

    def train1_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(steps=v["train1.steps"], base_lr=v["train1.base_lr"],
                           warmup=v["train1.warmup"], seed=v["seed"],
                           ref_len=v["train1.ref_len"],
                           tgt_len=v["train1.tgt_len"],
                           batch_size=v["train1.batch_size"],
                           loss_all_frames=v["train1.loss_all_frames"])

    def train2_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(steps=v["train2.steps"], base_lr=v["train2.base_lr"],
                           warmup=v["train2.warmup"], seed=v["seed"] + 2,
                           ref_len=v["train1.ref_len"],
                           tgt_len=v["train1.tgt_len"])

    def distill_config(self, k: int | None = None) -> DistillConfig:
        v = self.values
        return DistillConfig(k=v["distill.data_k"] if k is None else k,
                             teacher_steps=v["distill.teacher_steps"],
                             steps=v["distill.steps"], bank=v["distill.bank"],
                             lr=v["distill.lr"], seed=v["seed"] + 1,
                             ref_len=v["train1.ref_len"],
                             tgt_len=v["train1.tgt_len"],
                             scheme=v["sample.scheme"])

    def sample_config(self, seed_offset: int = 0) -> SampleConfig:
        v = self.values
        return SampleConfig(steps=v["sample.eval_steps"],
                            scheme=v["sample.scheme"],
                            seed=v["seed"] + seed_offset)


def parse_config(text: str) -> ExperimentConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in lines:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} "
                              f"(first on line {lines[key]})")
        conv = SCHEMA[key][0]
        try:
            values[key] = conv(val)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: {key}: {e}") from e
        lines[key] = lineno
    cfg = ExperimentConfig(values=values, lines=lines)
    cfg.validate()
    return cfg


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        return parse_config(path.read_text())
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e
