"""Command-line driver: ``planeagent <command> [--config FILE] [overrides]``."""
from __future__ import annotations

import argparse
import logging
import sys

import yaml

from . import pipeline
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("planeagent")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_IO, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    p.add_argument("--data", help="dataset directory (overrides paths.data)")
    p.add_argument("--runs", help="run directory (overrides paths.runs)")
    p.add_argument("--plane-type", choices=("TT", "TC"))
    p.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planeagent", description="Standard-plane localisation on synthetic head phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("show-config", help="print the effective configuration as YAML")
    _common(p)

    p = sub.add_parser("gen-data", help="generate phantoms and the train/test manifest")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int, help="dataset seed")

    p = sub.add_parser("train-agent", help="train the Double-DQN plane agent")
    _common(p)
    p.add_argument("--steps", type=int, help="agent.total_steps")
    p.add_argument("--seed", type=int, help="agent seed")

    p = sub.add_parser("train-at", help="train the termination models on agent rollouts")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--variants", nargs="+", choices=("fc", "rnn", "lstm"))

    p = sub.add_parser("evaluate", help="evaluate all configured methods on the test split")
    _common(p)

    p = sub.add_parser("localize", help="localise the plane in one volume")
    _common(p)
    p.add_argument("volume", help="raw volume file with its .json sidecar")
    p.add_argument("--out", required=True, help="output JSON plane record")
    p.add_argument("--pgm", help="also dump the selected slice as PGM")
    p.add_argument("--variant", choices=("fc", "rnn", "lstm"))
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {
        "paths.data": args.data,
        "paths.runs": args.runs,
        "plane_type": getattr(args, "plane_type", None),
        "dataset.count": getattr(args, "count", None),
        "agent.total_steps": getattr(args, "steps", None),
        "termination.epochs": getattr(args, "epochs", None),
        "termination.variants": getattr(args, "variants", None),
    }
    if args.command == "gen-data":
        over["dataset.seed"] = args.seed
    elif args.command == "train-agent":
        over["agent.seed"] = args.seed
    return cfg.override(over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "show-config":
            sys.stdout.write(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
        elif args.command == "gen-data":
            print(pipeline.gen_data(cfg))
        elif args.command == "train-agent":
            print(pipeline.cmd_train_agent(cfg))
        elif args.command == "train-at":
            for path in pipeline.cmd_train_at(cfg):
                print(path)
        elif args.command == "evaluate":
            results = pipeline.cmd_evaluate(cfg)
            for name, r in results.items():
                print(f"{name:14s} ang {r.mean('ang'):7.3f}  dis {r.mean('dis'):7.3f}  ssim {r.mean('ssim'):.4f}")
        elif args.command == "localize":
            rec = pipeline.cmd_localize(cfg, args.volume, args.out, args.pgm, args.variant)
            print(f"stop step {rec['stop_step']}: normal {rec['plane']['normal']} d {rec['plane']['d']:.4f}")
    except ConfigError as exc:
        print(f"planeagent: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingCheckpoint as exc:
        print(f"planeagent: missing checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (pipeline.IoError, OSError) as exc:
        print(f"planeagent: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic line
        print(f"planeagent: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
