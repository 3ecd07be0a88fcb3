"""``contrafeat`` command line: pca, train, eval, traverse, mask-experiment, distill.

Every command reads ``--config <json>`` (optional), applies per-key flag
overrides, then ``CONTRAFEAT_SEED``. Exit codes: 0 ok, 2 config, 3 numerical,
4 I/O.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .bundle import BundleError
from .config import ConfigError, RunConfig
from .trainer import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("contrafeat")


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional_str(text: str):
    return None if text.lower() in ("none", "null", "") else text


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for f in fields(RunConfig):
        kind = str(f.type)
        if kind.startswith("bool"):
            conv = _bool
        elif kind.startswith("int"):
            conv = int
        elif kind.startswith("float"):
            conv = float
        elif "None" in kind:
            conv = _optional_str
        else:
            conv = str
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=conv, default=None,
                           metavar=f.name.upper())


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    # an explicit "none" for frozen_directions must survive the None filter
    if getattr(args, "cfg_frozen_directions", None) is None and "--frozen-directions" in (args.raw_argv or []):
        overrides["frozen_directions"] = None
    cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg.with_env()


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contrafeat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="JSON run config")
        add_config_flags(p)
        return p

    command("pca", "sample W0 codes and store the PCA basis")
    p = command("train", "train the navigator; writes checkpoint/ and loss.csv")
    p.add_argument("--resume", action="store_true", help="continue from output_dir/checkpoint if present")
    p = command("eval", "attribute-change matrix, S_disen, N_discov")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--oracle-directions", action="store_true")
    p.add_argument("--random-baseline", action="store_true", help="also score random directions over eval_runs seeds")
    p.add_argument("--out", type=Path, default=None, help="report path (default output_dir/eval.json)")
    p = command("traverse", "render traversal strips as dir_<d>.ppm")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--oracle-directions", action="store_true")
    p.add_argument("--strength-range", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("--png", action="store_true", help="also write traverse.png with matplotlib")
    p.add_argument("--out", type=Path, default=None, help="directory (default output_dir/traverse)")
    p = command("mask-experiment", "pure vs mixed oracle pairs under each mask mode")
    p.add_argument("--out", type=Path, default=None, help="report path (default output_dir/mask_experiment.json)")
    p = command("distill", "paired dataset + group VAE, reports MIG and FVM")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--oracle-directions", action="store_true")
    p.add_argument("--baseline", action="store_true", help="also train the plain-VAE baseline")
    return parser


def _checkpoint(args, cfg) -> Path:
    path = args.checkpoint or Path(cfg.output_dir) / "checkpoint"
    if not (Path(path) / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return Path(path)


def run(args, cfg: RunConfig) -> dict:
    from . import experiments as ex

    out_dir = Path(cfg.output_dir)
    if args.command == "pca":
        return ex.run_pca(cfg, out_dir)
    if args.command == "train":
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.json")
        return ex.run_train(cfg, out_dir, resume=args.resume)
    if args.command == "eval":
        ckpt = None if args.oracle_directions else _checkpoint(args, cfg)
        report = ex.run_eval(cfg, ckpt, oracle=args.oracle_directions, random_baseline=args.random_baseline)
        ex.write_json(args.out or out_dir / "eval.json", report)
        return report
    if args.command == "traverse":
        ckpt = None if args.oracle_directions else _checkpoint(args, cfg)
        return ex.run_traverse(cfg, args.out or out_dir / "traverse", ckpt, args.oracle_directions,
                               strength_range=tuple(args.strength_range) if args.strength_range else None,
                               png=args.png)
    if args.command == "mask-experiment":
        report = ex.mask_experiment(cfg)
        ex.write_json(args.out or out_dir / "mask_experiment.json", report)
        return report
    if args.command == "distill":
        ckpt = None if args.oracle_directions else _checkpoint(args, cfg)
        report = ex.run_distill(cfg, out_dir / "distill", ckpt, args.oracle_directions, args.baseline)
        ex.write_json(out_dir / "distill" / "metrics.json", report)
        return report
    raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    args = parser.parse_args(argv)
    args.raw_argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        report = run(args, cfg)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, BundleError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print("---BEGIN REPORT---")
    print(json.dumps(report, indent=2, sort_keys=True))
    print("---END REPORT---")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
