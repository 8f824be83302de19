"""End-to-end experiment driver: offline optimization and forecasting
(phase 1), rolling online allocation (phase 2) and CSV reports."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import allocator as alloc
from .core import ValidationError
from .forecast import (InsufficientHistory, build_windows, default_candidates, reservation_pipeline,
                       select_model, write_instance_series, write_reservations, write_scores)
from .optimizer import OptimizerConfig, aggregate_instance_counts, solve_slot, write_instance_counts, write_plans
from .pricing import read_price_book, write_price_book
from .workload import (Workload, WorkloadConfig, default_catalog, default_prices, generate, ingest_csv,
                       read_catalog_csv, read_rtt_csv, rtt_from_catalog, write_catalog_csv, write_rtt_csv,
                       write_workload_csv)

log = logging.getLogger(__name__)


def _floats(text):
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _names(text):
    return tuple(x.strip().upper() for x in str(text).split(",") if x.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a run. Files use one ``key = value`` per line; ``#`` starts a comment."""

    workload: str = "generate"  # "generate" or a CSV path (long form or raw trace)
    horizon: int = 168
    test_hours: int = 24
    mean_viewers: float = 15.0
    zipf_exponent: float = 1.0
    home_bias: float = 0.5
    delay_grid: tuple = (8.8, 120.0, 180.0)
    diss_grid: tuple = (0.0, 10.0)
    on_demand_limit: int = alloc.DEFAULT_ON_DEMAND_LIMIT
    window: int = 24
    reserved_factor: float = 0.25
    prices: str = ""
    rtt: str = ""
    regions: str = ""
    train_fraction: float = 0.75
    algorithms: tuple = alloc.ALGORITHMS
    reservations: str = "forecast"  # or "oracle": reserve exactly the optimal counts
    forecast_mode: str = "ahead"  # "ahead": reserve for t+1 at the start of t; "online": at the start of t+1
    diss_check: str = "post"
    node_limit: int = 500_000
    seed: int = 0
    out: str = "out"

    _PARSERS = {"delay_grid": _floats, "diss_grid": _floats, "algorithms": _names}

    def __post_init__(self):
        # Normalize numeric types so that equal configs dump identically.
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(f.default, float) and not isinstance(value, bool):
                object.__setattr__(self, f.name, float(value))
        object.__setattr__(self, "delay_grid", tuple(float(x) for x in self.delay_grid))
        object.__setattr__(self, "diss_grid", tuple(float(x) for x in self.diss_grid))
        object.__setattr__(self, "algorithms", tuple(str(a).upper() for a in self.algorithms))
        if not self.delay_grid or not self.diss_grid:
            raise ValidationError("delay and diss grids must be non-empty")
        if not self.algorithms or any(a not in alloc.ALLOCATORS for a in self.algorithms):
            raise ValidationError(f"algorithms must be drawn from {', '.join(alloc.ALGORITHMS)}")
        if self.reservations not in ("forecast", "oracle"):
            raise ValidationError("reservations must be 'forecast' or 'oracle'")
        if self.forecast_mode not in ("ahead", "online"):
            raise ValidationError("forecast_mode must be 'ahead' or 'online'")
        if self.window < 1 or self.test_hours < 1:
            raise ValidationError("window and test_hours must be positive")
        if not 0 < self.train_fraction < 1:
            raise ValidationError("train_fraction must lie strictly between 0 and 1")
        if self.on_demand_limit < 0:
            raise ValidationError("on_demand_limit must be non-negative")
        # Warm-up slots (the first window + 2) are never evaluated, and model
        # selection needs at least two windows on each side of the split.
        first_test = self.horizon - self.test_hours
        if first_test < self.warmup:
            raise ValidationError(f"horizon {self.horizon} leaves the test day inside the warm-up of {self.warmup} slots")
        if first_test - self.window - self.lead + 1 < 4:
            raise ValidationError("not enough history before the test day to train forecasters")
        for path in (self.prices, self.rtt, self.regions):
            if path and not Path(path).is_file():
                raise ValidationError(f"file not found: {path}")
        if self.workload != "generate" and not Path(self.workload).is_file():
            raise ValidationError(f"workload file not found: {self.workload}")

    @property
    def lead(self) -> int:
        """Slots between the newest count available to the forecaster and the reserved slot."""
        return 2 if self.forecast_mode == "ahead" else 1

    @property
    def warmup(self) -> int:
        return self.window + 2

    @property
    def test_slots(self) -> range:
        return range(self.horizon - self.test_hours, self.horizon)

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
            parse = cls._PARSERS.get(key) or _scalar_parser(known[key].default)
            try:
                kwargs[key] = parse(raw)
            except ValueError:
                raise ValidationError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path=None, **overrides) -> "ExperimentConfig":
        values = {}
        if path is not None:
            with open(path) as fh:
                for line_no, line in enumerate(fh, start=1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ValidationError(f"{path}:{line_no}: expected key = value")
                    key, value = (part.strip() for part in line.split("=", 1))
                    values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for f in dataclasses.fields(self):
                if f.name == "out":
                    continue
                value = getattr(self, f.name)
                if isinstance(value, tuple):
                    value = ",".join(_fmt(v) for v in value)
                fh.write(f"{f.name} = {_fmt(value)}\n")

    def workload_config(self) -> WorkloadConfig:
        return WorkloadConfig(horizon=self.horizon, mean_viewers=self.mean_viewers,
                              zipf_exponent=self.zipf_exponent, home_bias=self.home_bias, seed=self.seed)


def _scalar_parser(default):
    if isinstance(default, bool):
        return lambda s: str(s).strip().lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return lambda s: int(str(s).strip())
    if isinstance(default, float):
        return lambda s: float(str(s).strip())
    return lambda s: str(s).strip()


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class Environment:
    catalog: list
    prices: object
    rtt: object

    @property
    def n(self) -> int:
        return self.rtt.n


def load_environment(cfg: ExperimentConfig) -> Environment:
    catalog = read_catalog_csv(cfg.regions) if cfg.regions else default_catalog()
    if cfg.prices:
        prices = read_price_book(cfg.prices)
    else:
        prices = default_prices(cfg.reserved_factor)
    rtt = read_rtt_csv(cfg.rtt)[0] if cfg.rtt else rtt_from_catalog(catalog)
    if not (len(catalog) == prices.n == rtt.n):
        raise ValidationError("catalog, price book and RTT matrix disagree on region count")
    return Environment(catalog, prices, rtt)


def load_workload(cfg: ExperimentConfig, env: Environment) -> Workload:
    if cfg.workload == "generate":
        wc = cfg.workload_config()
        if wc.n_regions != env.n:
            raise ValidationError("synthetic workload weights cover the 10 default regions only")
        wl = generate(wc)
    else:
        wl = ingest_csv(cfg.workload, env.catalog, horizon=cfg.horizon)
    wl.validate()
    return wl


@dataclass
class Phase1Result:
    delay: float
    solutions: list
    series: dict
    forecasters: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)
    reservations: dict = field(default_factory=dict)  # test slot -> per-region reserved counts

    def counts(self, slot: int) -> tuple:
        return tuple(s.counts[slot - s.start] for _, s in sorted(self.series.items()))


def _delay_dir(out_dir, delay) -> Path:
    return Path(out_dir) / f"D{delay:g}"


def solve_horizon(cfg: ExperimentConfig, workload: Workload, env: Environment, delay: float) -> list:
    ocfg = OptimizerConfig(delay_threshold=delay, node_limit=cfg.node_limit)
    return [solve_slot(workload[t], env.rtt, env.prices, ocfg, slot=t) for t in range(workload.horizon)]


def fit_forecasters(cfg: ExperimentConfig, series: dict) -> tuple[dict, dict]:
    """Per-region model selection on the history before the test day, then a refit on all of it."""
    cut = cfg.horizon - cfg.test_hours
    forecasters, scores = {}, {}
    for r, s in sorted(series.items()):
        windows = build_windows(s.counts[:cut], cfg.window, cfg.lead)
        train, test = windows.split(cfg.train_fraction)
        best, scores[r] = select_model(default_candidates(cfg.seed, period=24), train, test)
        forecasters[r] = best.fit(windows)
    return forecasters, scores


def plan_reservations(cfg: ExperimentConfig, result: Phase1Result) -> dict:
    out = {}
    for t in cfg.test_slots:
        if cfg.reservations == "oracle":
            out[t] = tuple(result.counts(t))
            continue
        newest = t - cfg.lead  # last slot whose optimal counts are known when reserving for t
        history = {r: s.counts[:newest + 1] for r, s in result.series.items()}
        try:
            ri = reservation_pipeline(history, result.forecasters, cfg.window)
        except InsufficientHistory as exc:
            raise ValidationError(f"slot {t}: {exc}") from None
        out[t] = tuple(ri[r] for r in sorted(ri))
    return out


def run_phase1(cfg: ExperimentConfig, workload: Workload, env: Environment, out_dir=None) -> dict:
    """Solve every slot for each delay bound, fit forecasters and plan test-day reservations."""
    results = {}
    for delay in cfg.delay_grid:
        sols = solve_horizon(cfg, workload, env, delay)
        res = Phase1Result(delay, sols, aggregate_instance_counts(sols, env.n))
        if cfg.reservations == "forecast":
            res.forecasters, res.scores = fit_forecasters(cfg, res.series)
        res.reservations = plan_reservations(cfg, res)
        results[delay] = res
        if out_dir is not None:
            save_phase1(res, _delay_dir(out_dir, delay))
            write_dataset(cfg, res.series, _delay_dir(out_dir, delay) / "dataset.csv")
    return results


def delay_dirs(out_dir, cfg: ExperimentConfig) -> dict:
    return {d: _delay_dir(out_dir, d) for d in cfg.delay_grid}


def save_phase1(res: Phase1Result, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_instance_counts(res.solutions, directory / "instance_counts.csv")
    write_plans(res.solutions, directory / "plan_placements.csv", directory / "plan_assignments.csv")
    write_instance_series(res.series, directory / "series.csv")
    if res.scores:
        write_scores(res.scores, directory / "scores.csv")
    write_reservations(res.reservations, directory / "reservations.csv")


@dataclass(frozen=True)
class MetricsRow:
    delay: float
    diss: float
    metrics: alloc.SlotMetrics


def allocate_slot(algorithm: str, items, reserved: Sequence[int], env: Environment, acfg: alloc.AllocatorConfig,
                  on_demand_limit: int, slot: int):
    """One slot of one algorithm on its own ledger; GMC never holds reservations."""
    stock = [0] * env.n if algorithm == "GMC" else list(reserved)
    ledger = alloc.CapacityLedger(stock, on_demand_limit)
    outcome = alloc.ALLOCATORS[algorithm](alloc.rank_videos(items), ledger, env.rtt, env.prices, acfg, slot=slot)
    ledger.check()
    return outcome, alloc.compute_slot_metrics(outcome, items, ledger, env.rtt, env.prices)


def run_phase2(cfg: ExperimentConfig, phase1: dict, workload: Workload, env: Environment, out_dir=None) -> list:
    """Allocate every test slot with each algorithm for each (D, diss) grid point."""
    rows = []
    for delay in cfg.delay_grid:
        reservations = phase1[delay].reservations
        for diss in cfg.diss_grid:
            acfg = alloc.AllocatorConfig(delay, diss, cfg.diss_check)
            for algorithm in cfg.algorithms:
                for t in cfg.test_slots:
                    _, m = allocate_slot(algorithm, workload[t], reservations[t], env, acfg, cfg.on_demand_limit, t)
                    rows.append(MetricsRow(delay, diss, m))
    if out_dir is not None:
        write_metrics(rows, Path(out_dir) / "metrics.csv")
    return rows


def write_metrics(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delay_ms", "diss_pct_threshold"] + alloc.METRIC_COLUMNS)
        for row in rows:
            w.writerow([repr(row.delay), repr(row.diss)] + row.metrics.row())


def read_metrics(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            m = alloc.SlotMetrics(int(rec["slot"]), rec["algorithm"], float(rec["total_cost"]),
                                  float(rec["avg_latency_ms"]), float(rec["hit_pct"]), float(rec["on_demand_pct"]),
                                  float(rec["diss_pct"]), int(rec["unserved"]))
            rows.append(MetricsRow(float(rec["delay_ms"]), float(rec["diss_pct_threshold"]), m))
    return rows


TOTALS_COLUMNS = ["delay_ms", "diss_pct_threshold", "algorithm", "hours", "total_cost", "mean_latency_ms",
                  "mean_hit_pct", "mean_on_demand_pct", "mean_diss_pct", "unserved"]
ORDERING_COLUMNS = ["delay_ms", "diss_pct_threshold", "slot", "GNCA", "GCA", "GMC", "gnca_le_gca", "gca_le_gmc",
                    "ordered"]


@dataclass
class Report:
    totals: list  # dicts keyed by TOTALS_COLUMNS
    ordering: list  # dicts keyed by ORDERING_COLUMNS
    gain: dict  # (delay, diss) -> total GNCA cost / total GMC cost


def emit_report(rows: Sequence[MetricsRow], out_dir=None) -> Report:
    """Hourly tables per grid point and algorithm, grid totals, per-slot cost ordering flags.

    Cost and unserved totals are sums of the hourly rows; the rate columns
    are plain means over the reported hours.
    """
    if not rows:
        raise ValidationError("no metrics rows to report")
    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault((row.delay, row.diss, row.metrics.algorithm), []).append(row.metrics)
    totals = []
    for (delay, diss, algorithm), ms in groups.items():
        ms.sort(key=lambda m: m.slot)
        k = len(ms)
        totals.append({
            "delay_ms": delay, "diss_pct_threshold": diss, "algorithm": algorithm, "hours": k,
            "total_cost": math.fsum(m.total_cost for m in ms),
            "mean_latency_ms": math.fsum(m.avg_latency_ms for m in ms) / k,
            "mean_hit_pct": math.fsum(m.hit_pct for m in ms) / k,
            "mean_on_demand_pct": math.fsum(m.on_demand_pct for m in ms) / k,
            "mean_diss_pct": math.fsum(m.diss_pct for m in ms) / k,
            "unserved": sum(m.unserved for m in ms),
        })
    ordering, gain = [], {}
    points = sorted({(d, s) for d, s, _ in groups})
    for delay, diss in points:
        per_alg = {a: {m.slot: m.total_cost for m in groups.get((delay, diss, a), [])} for a in alloc.ALGORITHMS}
        if per_alg["GNCA"] and per_alg["GMC"]:
            gain[delay, diss] = math.fsum(per_alg["GNCA"].values()) / math.fsum(per_alg["GMC"].values()) \
                if math.fsum(per_alg["GMC"].values()) > 0 else math.nan
        if all(per_alg.values()):
            for slot in sorted(per_alg["GNCA"]):
                a, b, c = (per_alg[x][slot] for x in alloc.ALGORITHMS)
                ordering.append({"delay_ms": delay, "diss_pct_threshold": diss, "slot": slot,
                                 "GNCA": a, "GCA": b, "GMC": c,
                                 "gnca_le_gca": int(a <= b), "gca_le_gmc": int(b <= c),
                                 "ordered": int(a <= b <= c)})
    report = Report(totals, ordering, gain)
    if out_dir is not None:
        _write_report(report, groups, Path(out_dir))
    return report


def _cell(v):
    return repr(v) if isinstance(v, float) else v


def _write_report(report: Report, groups: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for (delay, diss, algorithm), ms in sorted(groups.items()):
        alloc.write_metrics_csv(ms, out / f"hourly_D{delay:g}_diss{diss:g}_{algorithm}.csv")
    for name, columns, records in (("totals.csv", TOTALS_COLUMNS, report.totals),
                                   ("ordering.csv", ORDERING_COLUMNS, report.ordering)):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for rec in records:
                w.writerow([_cell(rec[c]) for c in columns])
    with open(out / "gain.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delay_ms", "diss_pct_threshold", "gnca_over_gmc"])
        for (delay, diss), ratio in sorted(report.gain.items()):
            w.writerow([repr(delay), repr(diss), repr(ratio)])


def write_inputs(cfg: ExperimentConfig, workload: Workload, env: Environment, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.txt")
    write_workload_csv(workload, out / "workload.csv")
    write_catalog_csv(env.catalog, out / "regions.csv")
    write_price_book(env.prices, out / "prices.csv")
    write_rtt_csv(env.rtt, [r.name for r in env.catalog], out / "rtt.csv")


def run_all(cfg: ExperimentConfig, out_dir=None) -> Report:
    out_dir = out_dir if out_dir is not None else cfg.out
    env = load_environment(cfg)
    workload = load_workload(cfg, env)
    write_inputs(cfg, workload, env, out_dir)
    phase1 = run_phase1(cfg, workload, env, out_dir)
    rows = run_phase2(cfg, phase1, workload, env, out_dir)
    return emit_report(rows, os.path.join(out_dir, "report"))


def write_dataset(cfg: ExperimentConfig, series: dict, path) -> None:
    """Supervised windows of the pre-test history: ``region,row,x0..x{window-1},target``."""
    cut = cfg.horizon - cfg.test_hours
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "row"] + [f"x{i}" for i in range(cfg.window)] + ["target"])
        for r, s in sorted(series.items()):
            ws = build_windows(s.counts[:cut], cfg.window, cfg.lead)
            for k in range(len(ws)):
                w.writerow([r, k] + [int(x) for x in ws.inputs[k]] + [int(ws.targets[k])])
