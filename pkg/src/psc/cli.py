"""Command-line surface for the full pipeline.

Exit codes: 0 success, 2 invalid configuration (message carries the
offending line), 3 missing input files, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import EVAL_SPLITS, ConfigError, ExperimentConfig, load_config
from .evals import eval_model, load_report, write_report
from .pairs import build_corpus, load_corpus, online_pair_source
from .sampling import SampleConfig, distill_student
from .stage1 import train_stage1
from .stage2 import train_stage2
from .tensor import Tensor
from .world import SceneRecord, VideoClip, load_dataset, make_dataset, \
    quantize_frames, synth_audio, write_scene_blob

SPLIT_DIRS = {s: f"eval_{s}" for s in EVAL_SPLITS}


def write_pgm(path: Path, frame: np.ndarray):
    """Binary PGM (P5) dump of one (H, W) u8 frame."""
    h, w = frame.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + frame.tobytes())


def gen_data(cfg: ExperimentConfig, out: Path) -> dict[str, Path]:
    v = cfg.values
    seed = v["seed"]
    made = {}
    made["train"] = make_dataset(v["data.train_scenes"],
                                 cfg.train_world("data.train_t"),
                                 seed + 10_000, out / "train")
    made["heldout"] = make_dataset(v["data.heldout_scenes"],
                                   cfg.train_world("data.heldout_t"),
                                   seed + 20_000, out / "heldout")
    pairs_world = cfg.train_world("data.pairs_t")
    made["pairs_src"] = make_dataset(v["data.pairs_scenes"], pairs_world,
                                     seed + 30_000, out / "pairs_src")
    for i, split in enumerate(EVAL_SPLITS):
        made[split] = make_dataset(v["data.eval_scenes"],
                                   cfg.eval_world(split),
                                   seed + 40_000 + 1_000 * i,
                                   out / SPLIT_DIRS[split])
    return made


def load_eval_sets(data_root: Path) -> dict[str, list[SceneRecord]]:
    data_root = Path(data_root)
    sets = {}
    for split, sub in SPLIT_DIRS.items():
        if (data_root / sub / "manifest.txt").exists():
            sets[split] = load_dataset(data_root / sub)
    if not sets:
        if (data_root / "manifest.txt").exists():
            sets[data_root.name] = load_dataset(data_root)
        else:
            raise FileNotFoundError(f"no eval datasets under {data_root}")
    return sets


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    made = gen_data(cfg, Path(args.out))
    for name, manifest in made.items():
        print(f"{name}: {manifest}")
    return 0


def cmd_train_stage1(args) -> int:
    cfg = load_config(args.config)
    records = load_dataset(Path(args.data))
    log = Path(args.out).with_suffix(".loss.csv")
    ckpt = train_stage1(records, cfg.model_config(), cfg.train1_config(),
                        log_path=log)
    save_checkpoint(Path(args.out), ckpt)
    print(f"stage1 checkpoint: {args.out}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    teacher = load_checkpoint(Path(args.teacher))
    records = load_dataset(Path(args.data))
    student = distill_student(teacher, records, cfg.distill_config(k=args.k))
    save_checkpoint(Path(args.out), student)
    print(f"student checkpoint (k={student.meta['student.k']}): {args.out}")
    return 0


def cmd_gen_pairs(args) -> int:
    cfg = load_config(args.config)
    student = load_checkpoint(Path(args.student))
    records = load_dataset(Path(args.data))
    n_pairs = args.n if args.n is not None else cfg["pairs.n_pairs"]
    manifest = build_corpus(records, student, n_pairs, cfg["seed"] + 3,
                            Path(args.out), scheme=cfg["sample.scheme"])
    print(f"corpus: {manifest}")
    return 0


def cmd_train_stage2(args) -> int:
    cfg = load_config(args.config)
    init = load_checkpoint(Path(args.init))
    if args.online:
        if not args.student or not args.data:
            raise ConfigError("--online requires --student and --data")
        student = load_checkpoint(Path(args.student))
        records = load_dataset(Path(args.data))
        source = online_pair_source(records, student,
                                    scheme=cfg["sample.scheme"])
    else:
        if not args.pairs:
            raise ConfigError("either --pairs or --online is required")
        source = load_corpus(Path(args.pairs))
    log = Path(args.out).with_suffix(".loss.csv")
    ckpt = train_stage2(init, source, cfg.train2_config(), log_path=log)
    save_checkpoint(Path(args.out), ckpt)
    print(f"stage2 checkpoint: {args.out}")
    return 0


def cmd_dub(args) -> int:
    from .evals import dub_scene

    ckpt = load_checkpoint(Path(args.model))
    records = load_dataset(Path(args.data))
    matches = [r for r in records if r.scene_id == args.scene]
    if not matches:
        raise FileNotFoundError(f"scene {args.scene} not in {args.data}")
    scene = matches[0]
    audio = synth_audio(scene.spec.t_frames, scene.audio.r, args.audio_seed)
    sample_cfg = SampleConfig(steps=args.steps, scheme=args.scheme,
                              seed=args.audio_seed)
    out_clip = dub_scene(ckpt, scene, audio, sample_cfg)
    write_scene_blob(Path(args.out), out_clip, audio)
    print(f"dub: {args.out}")
    if args.frames_dir:
        frames_dir = Path(args.frames_dir)
        frames_dir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(quantize_frames(out_clip.frames)[:, 0]):
            write_pgm(frames_dir / f"frame_{t:03d}.pgm", frame)
        print(f"frames: {frames_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(Path(args.model))
    sets = load_eval_sets(Path(args.data))
    report = eval_model(ckpt, sets, cfg.sample_config(), seed=cfg["seed"] + 5)
    write_report(Path(args.report), report)
    for split in report.splits():
        print(f"{split}: sync_err={report.split_mean('sync_err', split):.4f} "
              f"bg_err={report.split_mean('bg_err_mean', split):.4f}")
    print(f"report: {args.report}")
    return 0


def run_all(cfg: ExperimentConfig, out: Path) -> Path:
    out = Path(out)
    gen_data(cfg, out / "data")
    train_records = load_dataset(out / "data" / "train")
    pairs_records = load_dataset(out / "data" / "pairs_src")
    eval_sets = load_eval_sets(out / "data")

    stage1 = train_stage1(train_records, cfg.model_config(),
                          cfg.train1_config(),
                          log_path=out / "logs" / "stage1_loss.csv")
    save_checkpoint(out / "ckpts" / "stage1.psck", stage1)

    student = distill_student(stage1, train_records, cfg.distill_config())
    save_checkpoint(out / "ckpts" / "student.psck", student)

    build_corpus(pairs_records, student, cfg["pairs.n_pairs"],
                 cfg["seed"] + 3, out / "corpus",
                 scheme=cfg["sample.scheme"])
    corpus = load_corpus(out / "corpus")

    train_pairs = corpus[:len(corpus) - cfg["pairs.holdout"]] \
        if cfg["pairs.holdout"] else corpus
    stage2 = train_stage2(stage1, train_pairs, cfg.train2_config(),
                          log_path=out / "logs" / "stage2_loss.csv")
    save_checkpoint(out / "ckpts" / "stage2.psck", stage2)

    reports = out / "reports"
    r1 = eval_model(stage1, eval_sets, cfg.sample_config(),
                    seed=cfg["seed"] + 5)
    write_report(reports / "stage1.csv", r1)
    r2 = eval_model(stage2, eval_sets, cfg.sample_config(),
                    seed=cfg["seed"] + 5)
    write_report(reports / "stage2.csv", r2)

    digest = hashlib.sha256()
    digest.update((reports / "stage1.csv").read_bytes())
    digest.update((reports / "stage2.csv").read_bytes())
    digest_path = reports / "digest.txt"
    digest_path.write_text(digest.hexdigest() + "\n")
    return digest_path


def cmd_run_all(args) -> int:
    cfg = load_config(args.config)
    digest_path = run_all(cfg, Path(args.out))
    print(f"digest: {digest_path.read_text().strip()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psc",
                                description="audio-driven lip-sync pipeline "
                                            "on a synthetic world")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build the synthetic datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t1 = sub.add_parser("train-stage1", help="train the inpainting model")
    t1.add_argument("--config", required=True)
    t1.add_argument("--data", required=True)
    t1.add_argument("--out", required=True)
    t1.set_defaults(fn=cmd_train_stage1)

    d = sub.add_parser("distill", help="distill a few-step student")
    d.add_argument("--teacher", required=True)
    d.add_argument("--config", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--k", type=int, default=None)
    d.set_defaults(fn=cmd_distill)

    gp = sub.add_parser("gen-pairs", help="materialize the pseudo-pair corpus")
    gp.add_argument("--student", required=True)
    gp.add_argument("--data", required=True)
    gp.add_argument("--out", required=True)
    gp.add_argument("--config", required=True)
    gp.add_argument("--n", type=int, default=None)
    gp.set_defaults(fn=cmd_gen_pairs)

    t2 = sub.add_parser("train-stage2", help="train the mask-free model")
    t2.add_argument("--init", required=True)
    t2.add_argument("--config", required=True)
    t2.add_argument("--out", required=True)
    t2.add_argument("--pairs")
    t2.add_argument("--online", action="store_true")
    t2.add_argument("--student")
    t2.add_argument("--data")
    t2.set_defaults(fn=cmd_train_stage2)

    du = sub.add_parser("dub", help="dub one scene with fresh audio")
    du.add_argument("--model", required=True)
    du.add_argument("--data", required=True)
    du.add_argument("--scene", type=int, required=True)
    du.add_argument("--audio-seed", type=int, default=0)
    du.add_argument("--out", required=True)
    du.add_argument("--frames-dir", default=None)
    du.add_argument("--steps", type=int, default=16)
    du.add_argument("--scheme", default="euler")
    du.set_defaults(fn=cmd_dub)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on eval splits")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--config", required=True)
    ev.set_defaults(fn=cmd_eval)

    ra = sub.add_parser("run-all", help="full pipeline end to end")
    ra.add_argument("--config", required=True)
    ra.add_argument("--out", required=True)
    ra.set_defaults(fn=cmd_run_all)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 3
    except (AssertionError, ValueError) as e:
        print(f"internal invariant violation: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
