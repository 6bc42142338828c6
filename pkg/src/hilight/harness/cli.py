"""Command-line entry point: ``hilight <command> [--config PATH] [--seed N] [--out DIR] [--override k=v ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..synthdata import build_dataset, generate_sample, load_dataset
from .config import ConfigError, RunConfig, apply_overrides, load_config, parse_override
from .checkpoint import CheckpointError
from .evaluate import evaluate, render_alignment_maps, write_report
from .gradsuite import SCOPES, run_suite
from .train import CHECKPOINT_DIR, train_align, train_vlm

log = logging.getLogger("hilight")


def build_config(args, stage: str | None = None) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = dict(parse_override(o) for o in args.override)
    if stage == "align" and "stage" not in overrides:
        overrides["stage"] = stage
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "out", None) and args.command != "gen-data":
        overrides["output_dir"] = args.out
    return apply_overrides(cfg, overrides) if overrides else cfg


def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    root = args.out or cfg.data.path
    seed = cfg.data.seed if args.seed is None else args.seed
    manifest = build_dataset(root, cfg.data.count, seed, cfg.data.train_ratio, cfg.data.ranges)
    print(f"wrote {len(manifest.train_seeds)} train / {len(manifest.val_seeds)} val samples to {root}")
    return 0


def cmd_train_align(args) -> int:
    result = train_align(build_config(args, "align"))
    print(json.dumps(result.metrics, sort_keys=True))
    return 0


def cmd_train_vlm(args) -> int:
    cfg = build_config(args, "vlm")
    if cfg.stage == "align":
        raise ConfigError("train-vlm needs stage=vlm-stage1 or stage=vlm-stage2")
    result = train_vlm(cfg)
    print(json.dumps(result.metrics, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    checkpoint = args.checkpoint or Path(cfg.output_dir) / CHECKPOINT_DIR
    report = evaluate(cfg, checkpoint)
    if args.report:
        write_report(report, args.report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_render_maps(args) -> int:
    cfg = build_config(args)
    checkpoint = args.checkpoint or Path(cfg.output_dir) / CHECKPOINT_DIR
    if args.sample_seed is not None:
        sample = generate_sample(args.sample_seed, cfg.data.ranges)
    else:
        _, _, val = load_dataset(cfg.data.path)
        sample = val[args.index]
    out = args.maps_dir or Path(cfg.output_dir) / "maps"
    for path in render_alignment_maps(cfg, checkpoint, sample, out):
        print(path)
    return 0


def cmd_gradcheck(args) -> int:
    results, seconds = run_suite(args.scope, args.seeds, inject_bug=args.inject_bug, echo=print)
    worst = max(r.worst.max_rel_err for r in results)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results)} checks, max rel-err {worst:.3e}, {seconds:.1f}s")
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    return 0


def parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML config file")
    common.add_argument("--seed", type=int, help="run seed (dataset seed for gen-data)")
    common.add_argument("--out", help="output directory (dataset root for gen-data)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hilight", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset").set_defaults(fn=cmd_gen_data)
    sub.add_parser("train-align", parents=[common], help="alignment-stage training").set_defaults(fn=cmd_train_align)
    sub.add_parser("train-vlm", parents=[common], help="VLM stage 1 or 2").set_defaults(fn=cmd_train_vlm)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint directory (default OUT/checkpoint)")
    ev.add_argument("--report", help="also write the JSON report here")
    ev.set_defaults(fn=cmd_eval)

    rm = sub.add_parser("render-maps", parents=[common], help="alignment heatmaps for one sample")
    rm.add_argument("--checkpoint")
    rm.add_argument("--sample-seed", type=int, help="generate this sample instead of reading the val split")
    rm.add_argument("--index", type=int, default=0, help="val-split index when no sample seed is given")
    rm.add_argument("--maps-dir", help="image directory (default OUT/maps)")
    rm.set_defaults(fn=cmd_render_maps)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--scope", choices=SCOPES, default="all")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--inject-bug", action="store_true", help="add an op with a wrong backward")
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
