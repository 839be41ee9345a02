"""Command-line entry point: ``python -m cathseg <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .autograd import NumericalError
from .config import TARGETS, ConfigError, RunConfig, dump_config, load_config
from .dataset import DatasetError, generate_dataset, read_dataset, write_dataset
from .tensorio import TensorFormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {"seed": args.seed, "target": getattr(args, "target", None)}
    if getattr(args, "data", None):
        over["data"] = args.data
    if getattr(args, "checkpoint", None):
        over["checkpoint"] = args.checkpoint
    return cfg.with_overrides(**over)


def _records(cfg: RunConfig, split: str | None):
    root = Path(cfg.data)
    if not (root / "manifest.json").exists():
        raise DataError(f"{root}: no dataset manifest (run `generate` first)")
    recs = read_dataset(root, split)
    if not recs:
        raise DataError(f"{root}: split {split!r} is empty")
    return recs


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.data)
    recs = generate_dataset(cfg.n_train, cfg.n_val, cfg.frames, cfg.image_size, cfg.seed)
    manifest = write_dataset(recs, out)
    st = manifest["statistics"]
    print(f"wrote {st['sequences']} sequences ({st['frames']} frames, {st['filtered_frames']} filtered) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import train

    cfg = _config(args)
    out = Path(args.out or "run")
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint"
    recs = _records(cfg, "train")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    t0 = time.perf_counter()
    res = train(recs, cfg, ckpt, resume=not args.restart, log_path=out / "loss_log.csv")
    print(f"trained {res.steps} steps ({res.epochs} epochs) in {time.perf_counter() - t0:.1f}s; checkpoint {ckpt}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .pipeline import infer_sequence, load_checkpoint, write_predictions

    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("infer needs --checkpoint")
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out or "predictions")
    recs = _records(cfg, args.split)
    for rec in recs:
        pred = infer_sequence(model, rec.frames, rec.frames[0].mask(cfg.target), cfg.memory_capacity,
                              cfg.memory_threshold)
        write_predictions(out, rec.name, pred)
        admitted = sum(1 for e in pred.trace if e["event"] == "admit")
        print(f"{rec.name}: {len(rec.frames)} frames, {admitted} memory admissions")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate, evaluation_entries

    cfg = _config(args)
    if not args.predictions:
        raise ConfigError("eval needs --predictions")
    recs = _records(cfg, args.split)
    t0 = time.perf_counter()
    try:
        report = evaluate(evaluation_entries(recs, args.predictions, cfg.target))
    except TensorFormatError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out or "report")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.json").write_text(json.dumps({"config": cfg.to_dict(), "mean_dsc": report.mean_dsc,
                                                 "mean_mae": report.mean_mae}, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    print(f"DSC {report.mean_dsc:.4f}  MAE {report.mean_mae:.5f}  AP50 {report.ap50:.4f}  "
          f"AP75 {report.ap75:.4f}  mAP {report.map:.4f}  ({time.perf_counter() - t0:.2f}s)")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .pipeline import BASELINE_HEADER, baseline_rows, rows_to_csv

    cfg = _config(args)
    recs = _records(cfg, args.split)
    out = Path(args.out or "baseline")
    rows = baseline_rows(recs, args.predictions, args.level, cfg.seed, out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "baseline.csv").write_text(rows_to_csv(BASELINE_HEADER, rows), encoding="utf-8")
    ok = [r for r in rows if r[2] == "ok"]
    print(f"{len(ok)}/{len(rows)} frames applicable")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "baseline": cmd_baseline}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cathseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--target", choices=TARGETS)
        p.add_argument("--checkpoint", help="checkpoint directory")
        p.add_argument("--data", help="dataset root (overrides config)")
        p.add_argument("--split", default=None, help="train, val or all (default: all)")
        p.add_argument("--predictions", help="prediction directory written by infer")
        if name == "train":
            p.add_argument("--restart", action="store_true", help="ignore an existing checkpoint")
        if name == "baseline":
            p.add_argument("--level", type=float, default=0.7, help="relative intensity threshold")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError, TensorFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
