"""Command-line surface: gen, train, eval, sweep, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 missing input,
4 verification (gradcheck) failure.  All outputs are written atomically
and are byte-identical for identical inputs and seeds.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, RunConfig, apply_overrides, load_config
from .deformnet import AblationFlags, build_params
from .diffkit import load_checkpoint, save_checkpoint
from .eval import (
    MissingCheckpointError,
    evaluate_model,
    keypoint_count_sweep,
    write_report_csv,
    write_sweep_csv,
)
from .synth import generate_dataset
from .training import load_split, train_model, trainlog_csv_bytes

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_VERIFICATION = 4

SWEEP_COUNTS = (512, 1024, 1536, 2048)
SWEEP_VARIANTS = (
    ("baseline", AblationFlags(use_deform=False, use_gate=False)),
    ("deform+gate", AblationFlags(use_deform=True, use_gate=True)),
)


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    return apply_overrides(
        cfg,
        deform=getattr(args, "deform", None),
        gate=getattr(args, "gate", None),
        keypoints=getattr(args, "keypoints", None),
        sampler=getattr(args, "sampler", None),
        seed=getattr(args, "seed", None),
    )


def cmd_gen(args) -> int:
    cfg = _load(args)
    out_dir = args.out or cfg.data_dir
    rows = generate_dataset(cfg.gen, cfg.n_scenes, out_dir, seed=args.seed)
    n_train = sum(1 for r in rows if r["split"] == "train")
    print(f"wrote {len(rows)} scenes to {out_dir} ({n_train} train / {len(rows) - n_train} val)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    out_dir = args.out or cfg.checkpoint_dir
    try:
        scenes = load_split(cfg.data_dir, "train")
    except FileNotFoundError:
        print(
            f"no dataset at {cfg.data_dir!r}; run `deformkit gen --config ...` first",
            file=sys.stderr,
        )
        return EXIT_MISSING_INPUT
    params, losses = train_model(
        scenes,
        cfg.model,
        cfg.flags,
        epochs=cfg.epochs,
        lr=cfg.lr,
        keypoints=cfg.keypoints,
        sampler=cfg.sampler,
        seed=cfg.seed,
        batch_scenes=cfg.batch_scenes,
    )
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, os.path.basename(cfg.checkpoint_path()))
    log_path = os.path.join(out_dir, os.path.basename(cfg.trainlog_path()))
    save_checkpoint(params, ckpt_path)
    _atomic_write(log_path, trainlog_csv_bytes(losses))
    print(f"trained {cfg.flags.variant} on {len(scenes)} scenes; final loss {losses[-1]:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    out_dir = args.out or cfg.report_dir
    ckpt_path = cfg.checkpoint_path()
    if not os.path.exists(ckpt_path):
        print(f"checkpoint not found: {ckpt_path}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    try:
        scenes = load_split(cfg.data_dir, "val")
    except FileNotFoundError:
        print(f"no dataset at {cfg.data_dir!r}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    params = build_params(0, cfg.model)
    load_checkpoint(params, ckpt_path)
    report = evaluate_model(
        params, scenes, cfg.model, cfg.flags, cfg.keypoints, cfg.sampler, seed=cfg.seed
    )
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, os.path.basename(cfg.report_path()))
    write_report_csv(report, report_path)
    print(f"evaluated {cfg.flags.variant} over {len(scenes)} val scenes -> {report_path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out_dir = args.out or cfg.report_dir
    checkpoints = {}
    for variant, flags in SWEEP_VARIANTS:
        tag = f"d{int(flags.use_deform)}g{int(flags.use_gate)}"
        for count in SWEEP_COUNTS:
            checkpoints[(variant, count)] = os.path.join(
                cfg.checkpoint_dir, f"model_{tag}_k{count}_s{cfg.seed}.dckpt"
            )
    try:
        scenes = load_split(cfg.data_dir, "val")
    except FileNotFoundError:
        print(f"no dataset at {cfg.data_dir!r}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    try:
        rows = keypoint_count_sweep(
            checkpoints, SWEEP_VARIANTS, SWEEP_COUNTS, scenes, cfg.model,
            sampler=cfg.sampler, seed=cfg.seed,
        )
    except MissingCheckpointError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING_INPUT
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"sweep_s{cfg.seed}.csv")
    write_sweep_csv(rows, path)
    print(f"sweep over {SWEEP_COUNTS} keypoints -> {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    results = run_suite(seeds=range(args.seeds), corrupt_op=args.corrupt)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max relative error {r.max_rel_err:.3e} (tol {r.tolerance:g})")
    if failed:
        print(f"gradcheck FAILED: {', '.join(r.name for r in failed)}", file=sys.stderr)
        return EXIT_VERIFICATION
    print(f"gradcheck passed: {len(results)} ops over {args.seeds} seeds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deformkit",
        description="Deformable-keypoint point-cloud pipeline on synthetic scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training_flags=False):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if training_flags:
            p.add_argument("--deform", action="store_true", default=None,
                           help="enable keypoint deformation")
            p.add_argument("--gate", action="store_true", default=None,
                           help="enable context gating")
            p.add_argument("--keypoints", type=int, default=None)
            p.add_argument("--sampler", choices=("fps", "random"), default=None)

    p_gen = sub.add_parser("gen", help="materialize a synthetic dataset")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train one model variant")
    common(p_train, training_flags=True)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    common(p_eval, training_flags=True)
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="keypoint-count sweep from checkpoints")
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_gc = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p_gc.add_argument("--seeds", type=int, default=20, help="number of random seeds per op")
    p_gc.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # test hook
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
