"""Command line entry point: ``pdmp-unbiased <command> [options]``.

Commands
--------
sample          simulate one trajectory and write it as text
couple          run one coupled pair and print its coupling time
meeting-times   coupling-time experiment over dimensions and lags
inefficiency    budget-matched comparison against a single chain
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

import yaml

from .harness import (
    Cell,
    ExperimentConfig,
    coupled_run,
    draw_initial,
    initial_law,
    make_sampler,
    replicate_rng,
    run_inefficiency,
    run_meeting_times,
    summarise_meeting_times,
    write_inefficiency,
    write_meeting_times,
)
from .pdmp import Trajectory, advance, dump_trajectory


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def load_config(args) -> ExperimentConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_mapping(overrides)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with experiment settings")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdmp-unbiased", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="simulate one trajectory")
    _common(p)
    p.add_argument("--horizon", type=float, default=100.0)

    p = sub.add_parser("couple", help="run one coupled pair")
    _common(p)

    p = sub.add_parser("meeting-times", help="coupling times over dimensions and lags")
    _common(p)

    p = sub.add_parser("inefficiency", help="inefficiency against a single chain")
    _common(p)
    return parser


def cmd_sample(cfg: ExperimentConfig, args) -> int:
    dim = cfg.dims[0]
    lam = cfg.refresh_rate(dim)
    sampler = make_sampler(cfg.sampler, dim, lam)
    rng = replicate_rng(cfg.seed, 0, 0, 0)
    init = draw_initial(sampler, *initial_law(cfg, dim), rng)
    traj = Trajectory(0.0)
    advance(sampler, traj, init.x, init.v, args.horizon, rng)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "trajectory.txt")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dump_trajectory(traj))
    print(path)
    return 0


def cmd_couple(cfg: ExperimentConfig, args) -> int:
    cell = Cell(0, cfg.dims[0], cfg.lags[0])
    pair = coupled_run(cfg, cell, replicate_rng(cfg.seed, 0, 0, 0))
    report = {
        "dim": cell.dim,
        "lag": cell.lag,
        "coupled": pair.coupled,
        "kappa": pair.kappa,
        "windows": pair.window,
        "events_to_couple": pair.events_before,
    }
    print(json.dumps(report))
    return 0 if pair.coupled else 1


def cmd_meeting_times(cfg: ExperimentConfig, args) -> int:
    records = run_meeting_times(cfg, threads=args.threads)
    runs, summary = write_meeting_times(records, cfg, args.out)
    for s in summarise_meeting_times(records, cfg.quantile):
        print(f"d={s.dim} lag={s.lag!r} mean_kappa={s.mean_kappa:.3f} failed={s.n_failed}/{s.n}")
    print(runs)
    print(summary)
    return 0


def cmd_inefficiency(cfg: ExperimentConfig, args) -> int:
    rows, summary = run_inefficiency(cfg, threads=args.threads)
    paths = write_inefficiency(rows, summary, cfg, args.out)
    for s in summary:
        print(f"d={s['dim']} lag={s['lag']!r} moment={s['moment']} inefficiency={s['inefficiency']:.4g}")
    for p in paths:
        print(p)
    return 0


COMMANDS = {
    "sample": cmd_sample,
    "couple": cmd_couple,
    "meeting-times": cmd_meeting_times,
    "inefficiency": cmd_inefficiency,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
