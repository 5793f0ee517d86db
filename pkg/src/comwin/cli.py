"""``comwin`` command line: synth / train / eval / aggregate / plot.

Exit codes: 0 success, 1 usage error, 2 runtime failure. ``COMWIN_SEED``
overrides the master seed of ``synth`` and ``train`` configs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed JSON in {path}: {exc}") from None


def cmd_synth(args) -> int:
    from .cotrain import env_seed
    from .synthdata import SynthConfig, generate_dataset

    cfg = SynthConfig.from_dict(_read_json(args.config))
    cfg = dataclasses.replace(cfg, seed=env_seed(cfg.seed))
    generate_dataset(cfg, args.out)
    print(Path(args.out) / "manifest.json")
    return 0


def cmd_train(args) -> int:
    from .cotrain import TrainConfig, env_seed, train

    if not Path(args.config).exists():
        raise FileNotFoundError(f"config file not found: {args.config}")
    cfg = TrainConfig.from_json(args.config)
    cfg = dataclasses.replace(cfg, seed=env_seed(cfg.seed))
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=args.iterations)
    train(cfg, args.out, force=args.force)
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    from .arrayio import load_manifest
    from .cotrain import COMPLETE_MARKER, evaluate, load_ensemble, write_report

    run = Path(args.run)
    if not run.is_dir():
        raise FileNotFoundError(f"missing run directory {run}")
    if not (run / COMPLETE_MARKER).exists():
        raise FileNotFoundError(f"run {run} has no completed checkpoints")
    cfg = json.loads((run / "config.json").read_text())
    manifest = load_manifest(args.manifest or cfg["manifest"])
    models = load_ensemble(run / "checkpoints" / "final")
    report = evaluate(models, manifest, args.split, args.mode)
    stem = run / "eval" / f"{args.split}_{args.mode}"
    write_report(report, stem.with_suffix(".json"), stem.with_suffix(".csv"))
    agg = report.aggregate()["mean"]["dice"]
    print(f"dice {agg['mean']:.4f} +- {agg['std']:.4f} ({stem.with_suffix('.json')})")
    return 0


def cmd_aggregate(args) -> int:
    import torch

    from . import aggregate as agg
    from . import arrayio

    maps = [torch.from_numpy(arrayio.load(p)) for p in args.maps]
    for p, m in zip(args.maps, maps):
        if m.dim() != 3:
            raise ValueError(f"{p}: expected a C x H x W probability map")
    if args.strategy == "comwin":
        labels = agg.comwin_aggregate(maps)
    elif args.strategy in ("cps", "threshold"):
        if len(maps) != 1:
            raise ValueError(f"{args.strategy} takes exactly one map, got {len(maps)}")
        labels = agg.cps_aggregate(maps[0]) if args.strategy == "cps" else agg.threshold_aggregate(maps[0], args.tau)
    elif args.strategy == "avg":
        labels = agg.average_ensemble(maps)
    else:
        labels = agg.voting_ensemble(maps)
    arrayio.save(args.out, labels.numpy().astype(np.uint8))
    print(args.out)
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_run

    for path in plot_run(args.run):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="comwin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="co-train an ensemble")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a completed run")
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=["labeled", "unlabeled", "test"])
    p.add_argument("--mode", default="first", choices=["first", "ensemble"])
    p.add_argument("--manifest", default=None, help="override the manifest recorded in the run")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("aggregate", help="pseudo labels from CWT1 probability maps")
    p.add_argument("maps", nargs="+")
    p.add_argument("--strategy", default="comwin", choices=["comwin", "cps", "threshold", "avg", "vote"])
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("plot", help="plots and tables from a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"comwin: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"comwin: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
