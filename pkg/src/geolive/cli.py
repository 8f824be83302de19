"""Command-line entry point. Each stage reads the previous stage's files from --out."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as H
from .core import ValidationError
from .forecast import read_instance_series, read_reservations, write_instance_series, write_reservations, write_scores
from .optimizer import (Infeasible, NodeLimitExceeded, aggregate_instance_counts, write_instance_counts,
                        write_plans)
from .workload import ingest_csv

log = logging.getLogger("geolive")


def _config(args) -> H.ExperimentConfig:
    overrides = {"seed": args.seed, "out": args.out}
    return H.ExperimentConfig.load(args.config, **overrides)


def _out(cfg) -> Path:
    return Path(cfg.out)


def _require(path: Path, stage: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{path} is missing; run `{stage}` first")
    return path


def _inputs(cfg):
    """Environment and workload, generated once and then re-read from the output directory."""
    env = H.load_environment(cfg)
    out = _out(cfg)
    if (out / "workload.csv").is_file():
        wl = ingest_csv(out / "workload.csv", env.catalog, horizon=cfg.horizon)
    else:
        wl = H.load_workload(cfg, env)
        H.write_inputs(cfg, wl, env, out)
    return env, wl


def cmd_gen_workload(cfg):
    env = H.load_environment(cfg)
    H.write_inputs(cfg, H.load_workload(cfg, env), env, _out(cfg))


def cmd_optimize(cfg):
    env, wl = _inputs(cfg)
    for delay, directory in H.delay_dirs(_out(cfg), cfg).items():
        sols = H.solve_horizon(cfg, wl, env, delay)
        res = H.Phase1Result(delay, sols, aggregate_instance_counts(sols, env.n))
        directory.mkdir(parents=True, exist_ok=True)
        write_instance_counts(sols, directory / "instance_counts.csv")
        write_plans(sols, directory / "plan_placements.csv", directory / "plan_assignments.csv")
        write_instance_series(res.series, directory / "series.csv")


def cmd_build_dataset(cfg):
    for directory in H.delay_dirs(_out(cfg), cfg).values():
        series = read_instance_series(_require(directory / "series.csv", "optimize"))
        H.write_dataset(cfg, series, directory / "dataset.csv")


def cmd_forecast(cfg):
    for delay, directory in H.delay_dirs(_out(cfg), cfg).items():
        series = read_instance_series(_require(directory / "series.csv", "optimize"))
        res = H.Phase1Result(delay, [], series)
        if cfg.reservations == "forecast":
            res.forecasters, res.scores = H.fit_forecasters(cfg, series)
            write_scores(res.scores, directory / "scores.csv")
        res.reservations = H.plan_reservations(cfg, res)
        write_reservations(res.reservations, directory / "reservations.csv")


def cmd_simulate(cfg):
    env, wl = _inputs(cfg)
    phase1 = {}
    for delay, directory in H.delay_dirs(_out(cfg), cfg).items():
        res = H.Phase1Result(delay, [], {})
        res.reservations = read_reservations(_require(directory / "reservations.csv", "forecast"))
        missing = [t for t in cfg.test_slots if t not in res.reservations]
        if missing:
            raise ValidationError(f"{directory / 'reservations.csv'} lacks test slots {missing[:3]}...")
        phase1[delay] = res
    H.run_phase2(cfg, phase1, wl, env, _out(cfg))


def cmd_report(cfg):
    rows = H.read_metrics(_require(_out(cfg) / "metrics.csv", "simulate"))
    report = H.emit_report(rows, _out(cfg) / "report")
    for (delay, diss), ratio in sorted(report.gain.items()):
        print(f"D={delay:g}ms diss={diss:g}%: GNCA/GMC cost ratio {ratio:.4f}")


def cmd_all(cfg):
    report = H.run_all(cfg, _out(cfg))
    for (delay, diss), ratio in sorted(report.gain.items()):
        print(f"D={delay:g}ms diss={diss:g}%: GNCA/GMC cost ratio {ratio:.4f}")


COMMANDS = {
    "gen-workload": (cmd_gen_workload, "write the workload, region catalog, prices and RTT matrix"),
    "optimize": (cmd_optimize, "solve every slot offline for each delay bound"),
    "build-dataset": (cmd_build_dataset, "turn optimal instance counts into forecasting windows"),
    "forecast": (cmd_forecast, "select per-region forecasters and plan test-day reservations"),
    "simulate": (cmd_simulate, "run the online allocators over the test day"),
    "report": (cmd_report, "aggregate metrics into hourly tables, totals and orderings"),
    "all": (cmd_all, "run every stage"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geolive", description="Geo-distributed livestream transcoding experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command][0](cfg)
    except (ValidationError, Infeasible, NodeLimitExceeded, FileNotFoundError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, ValidationError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
