"""Command-line entry point.

    anchorsched reproduce [--config FILE] [--profile paper|desk] [--seed N] [--out DIR] [--jobs N]
    anchorsched train ID  [--config FILE] [--profile ...] [--rep R] [--episodes E] [--steps T] [--out DIR]
    anchorsched eval --checkpoint FILE [--seed N] [--config FILE] [--profile ...] [--out DIR]
    anchorsched report --out DIR

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .agent import Agent
from .config import load_config
from .env import ConfigError
from .experiment import SCHEDULER_IDS, ProtocolError, AggregationError
from .runner import (
    checkpoint_path,
    eval_agent,
    log_path,
    reproduce,
    rows_to_csv,
    train_cell,
    tune_allocator,
    write_report,
)

log = logging.getLogger("anchorsched")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (a run manifest also works)")
    p.add_argument("--profile", choices=["paper", "desk"])
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=str, help="output directory")
    p.add_argument("--episodes", type=int, help="training episodes per stage")
    p.add_argument("--steps", type=int, help="training steps per episode")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anchorsched", description="Weight-anchored DRL scheduler experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("reproduce", help="train and evaluate all eight schedulers")
    _config_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel cells")

    p = sub.add_parser("train", help="train a single scheduler")
    p.add_argument("scheduler", choices=SCHEDULER_IDS)
    p.add_argument("--rep", type=int, default=0, help="repetition index (seed lineage)")
    _config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the evaluation protocol")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--name", default=None, help="scheduler label for the CSV row")
    p.add_argument("--rep", type=int, default=0)
    _config_flags(p)

    p = sub.add_parser("report", help="re-aggregate finished cells in an output directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _load(args):
    overrides = {"seed": args.seed, "out": args.out, "episodes": args.episodes, "steps": args.steps}
    return load_config(args.config, args.profile, overrides)


def _cmd_reproduce(args) -> int:
    cfg = _load(args)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    report = reproduce(cfg, cfg.out, jobs=args.jobs)
    fmt = lambda x, spec: "n/a" if x is None else format(x, spec)
    for sid, s in report["schedulers"].items():
        print(f"{sid:6s} reward/BS {fmt(s['reward_norm_bs_mean'], '.3f')} "
              f"(var {fmt(s['reward_norm_bs_var'], '.2e')})  "
              f"prio-timeouts/BS {fmt(s['prio_timeout_norm_bs_mean'], '.3f')} "
              f"(var {fmt(s['prio_timeout_norm_bs_var'], '.2e')})")
    print(f"artifacts in {cfg.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load(args)
    tune_allocator()
    train_cell(cfg, cfg.out, args.rep, args.scheduler)
    print(f"wrote {checkpoint_path(cfg.out, args.rep, args.scheduler)}")
    print(f"wrote {log_path(cfg.out, args.rep, args.scheduler)}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load(args)
    if not args.checkpoint.exists():
        raise ProtocolError(f"checkpoint not found: {args.checkpoint}")
    tune_allocator()
    agent = Agent.load(args.checkpoint)
    name = args.name or args.checkpoint.name.split(".")[0]
    seed = cfg.seed
    row = eval_agent(cfg, agent, seed, name, args.rep)
    text = rows_to_csv([row])
    sys.stdout.write(text)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{name}_seed{seed}.csv").write_text(text)
    return 0


def _cmd_report(args) -> int:
    manifest = args.out / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"no manifest in {args.out}")
    cfg = load_config(manifest, overrides={"out": str(args.out)})
    report = write_report(cfg, args.out)
    print(json.dumps(report["schedulers"], indent=2))
    return 0


COMMANDS = {"reproduce": _cmd_reproduce, "train": _cmd_train, "eval": _cmd_eval, "report": _cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ProtocolError, AggregationError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
