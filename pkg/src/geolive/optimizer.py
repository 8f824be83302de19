"""Exact offline placement optimizer.

The cost objective and every constraint are separable by video, so each
video is solved on its own: choose the regions that transcode each quality
and the serving site of every demanded (quality, region) pair, minimizing
rental + migration + serving cost subject to the viewer-weighted average
delay bound.

The search is a depth-first branch and bound over demand assignments
(placements follow from the assignments, plus the forced original copy at
the broadcaster's region). Lower bounds combine a fixed-cost sharing bound
with a Lagrangian relaxation of the delay constraint.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .core import AllocationPlan, DemandMatrix, Quality, RttMatrix, ValidationError, VideoMeta, avg_latency, validate_plan
from .forecast import InstanceSeries
from .pricing import PriceBook, video_cost

log = logging.getLogger(__name__)


# Subset enumeration (2**n rows) is used for the bound up to this many regions.
EXACT_BOUND_MAX_REGIONS = 12
MULTIPLIER_GRID = (0.5, 1.5, 2.0, 3.0, 5.0)


class Infeasible(Exception):
    def __init__(self, video_id, message):
        super().__init__(f"video {video_id}: {message}")
        self.video_id = video_id


class NodeLimitExceeded(Exception):
    """Search budget exhausted; ``best`` holds the best plan found so far."""

    def __init__(self, video_id, best):
        super().__init__(f"video {video_id}: node limit reached after {best.nodes} nodes")
        self.video_id = video_id
        self.best = best


class NodeLimitWarning(UserWarning):
    pass


class ExplosionGuard(Exception):
    pass


class GapInHorizon(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    delay_threshold: float
    node_limit: int = 500_000
    tolerance: float = 1e-9
    on_node_limit: str = "warn"

    def __post_init__(self):
        if not self.delay_threshold > 0:
            raise ValidationError("delay threshold must be positive")
        if self.tolerance < 0:
            raise ValidationError("tolerance must be non-negative")
        if self.on_node_limit not in ("warn", "raise"):
            raise ValidationError("on_node_limit must be 'warn' or 'raise'")


@dataclass(frozen=True)
class VideoSolution:
    plan: AllocationPlan
    cost: float
    latency: float
    nodes: int
    proven_optimal: bool


def _latency_slack(budget: float) -> float:
    return 1e-9 * max(1.0, budget)


def _latency_ok(lat_sum: float, budget: float) -> bool:
    return lat_sum <= budget + _latency_slack(budget)


def _better(cost, key, best_cost, best_key, tol) -> bool:
    if best_cost is None or cost < best_cost - tol:
        return True
    return abs(cost - best_cost) <= tol and key < best_key


class _Search:
    def __init__(self, video, demand, rtt, prices, cfg):
        self.video, self.cfg = video, cfg
        qb, rb = video.original_quality, video.broadcast_region
        n = rtt.n
        if prices.n != n:
            raise ValidationError("price book and RTT matrix disagree on region count")
        if not 0 <= rb < n:
            raise ValidationError(f"broadcast region {rb} out of range")
        demand.check_against(video)
        self.n = n
        kappa = prices.kappa
        self.fixed = np.array([prices.zeta[r] + prices.eta[rb] * kappa[qb] for r in range(n)])
        # Quality groups are contiguous so a finished group's open set stops mattering.
        items = sorted(demand.items(), key=lambda kv: (-int(kv[0][1]), -kv[1], kv[0][0]))
        self.m = m = len(items)
        for (rw, _), _p in items:
            if not 0 <= rw < n:
                raise ValidationError(f"viewer region {rw} out of range")
        self.dq = [q for (_, q), _ in items]
        self.dw = [rw for (rw, _), _ in items]
        omega = np.asarray(prices.omega)
        d = rtt.values
        self.serve = np.array([omega * kappa[q] * p for (_, q), p in items]).reshape(m, n)
        self.lat = np.array([d[:, rw] * p for (rw, _), p in items]).reshape(m, n)
        self.budget = cfg.delay_threshold * demand.total_viewers
        minlat = self.lat.min(axis=1) if m else np.zeros(0)
        self.minlat_suffix = np.concatenate([np.cumsum(minlat[::-1])[::-1], [0.0]])

        self.groups = []  # (quality, start, end)
        for j, q in enumerate(self.dq):
            if not self.groups or self.groups[-1][0] != q:
                self.groups.append([q, j, j + 1])
            else:
                self.groups[-1][2] = j + 1
        self.group_of = [gi for gi, (_, s, e) in enumerate(self.groups) for _ in range(s, e)]
        self.init_open = [{rb} if q == qb else set() for q, _, _ in self.groups]

        # Exact per-group facility-location bounds by subset enumeration on small catalogs.
        self.subsets = None
        if n <= EXACT_BOUND_MAX_REGIONS:
            bits = np.arange(1 << n)[:, None] >> np.arange(n)[None, :] & 1
            self.subsets = bits.astype(bool)
            self.subset_fixed = bits @ self.fixed
        self._cache = {}

        # Feasible Lagrangian minimizers double as starting incumbents.
        self.seeds = [list(self.dw)]
        lam = self._root_multiplier() if m else 0.0
        self.guide = lam
        # Deeper nodes have less delay slack and prefer larger multipliers; a
        # small grid around the root optimum covers them, best guess first.
        self.lambdas = [lam, 0.0] + [lam * f for f in MULTIPLIER_GRID] if lam > 0 else [0.0]
        self.weighted = [self.serve + lam_ * self.lat for lam_ in self.lambdas]
        # Bound contribution of untouched groups, per multiplier: fut[k][g] covers groups >= g.
        self.fut = []
        for k in range(len(self.lambdas)):
            vals = [self._group_bound(k, s, e, self.init_open[gi])[0]
                    for gi, (_, s, e) in enumerate(self.groups)]
            self.fut.append(np.concatenate([np.cumsum(vals[::-1])[::-1], [0.0]]))
            seed = [r for gi, (_, s, e) in enumerate(self.groups)
                    for r in self._group_bound(k, s, e, self.init_open[gi])[2]]
            if _latency_ok(float(self.lat[np.arange(m), seed].sum()) if m else 0.0, self.budget):
                self.seeds.append(seed)

    def _group_bound(self, k, start, end, open_set, w=None):
        """Lower bound on the weighted cost of demands ``start:end`` of one group.

        Returns ``(bound, latency, serving regions)`` of the minimizing assignment.
        """
        if start >= end:
            return 0.0, 0.0, ()
        key = None
        if w is None:
            key = (k, start, frozenset(open_set))
            hit = self._cache.get(key)
            if hit is not None:
                return hit
            w = self.weighted[k]
        ws = w[start:end]
        opened = sorted(open_set)
        if self.subsets is None:
            share = self.fixed / (end - start)
            share[opened] = 0.0
            idx = (ws + share).argmin(axis=1)
            val = float((ws + share).min(axis=1).sum())
        else:
            # tab[:, S] = cheapest site in S or the open set, built by doubling over bits.
            n = self.n
            tab = np.empty((end - start, 1 << n))
            tab[:, 0] = ws[:, opened].min(axis=1) if opened else np.inf
            for bit in range(n):
                h = 1 << bit
                np.minimum(tab[:, :h], ws[:, bit:bit + 1], out=tab[:, h:2 * h])
            fixed = self.subset_fixed
            if opened:
                fixed = fixed - self.subsets[:, opened] @ self.fixed[opened]
            totals = tab.sum(axis=0) + fixed
            best = int(totals.argmin())
            allowed = self.subsets[best].copy()
            allowed[opened] = True
            idx = np.where(allowed, ws, np.inf).argmin(axis=1)
            val = float(totals[best])
        lat = float(self.lat[np.arange(start, end), idx].sum())
        out = (val, lat, tuple(int(r) for r in idx))
        if key is not None:
            self._cache[key] = out
        return out

    def _root_multiplier(self) -> float:
        """Maximizer of the root Lagrangian dual over the delay constraint (bisection)."""
        def slope(lam):
            w = self.serve + lam * self.lat
            parts = [self._group_bound(None, s, e, self.init_open[gi], w) for gi, (_, s, e) in enumerate(self.groups)]
            total = sum(p[1] for p in parts)
            if _latency_ok(total, self.budget):
                self.seeds.append([r for p in parts for r in p[2]])
            return total - self.budget

        if slope(0.0) <= 0:
            return 0.0
        lo, hi = 0.0, 1e-6
        while slope(hi) > 0:
            lo, hi = hi, hi * 4
            if hi > 1e12:
                return lo
        # Any multiplier yields a valid bound; a few digits are enough.
        while hi - lo > 1e-3 * hi:
            mid = 0.5 * (lo + hi)
            if slope(mid) > 0:
                lo = mid
            else:
                hi = mid
        return hi

    def _bounds(self, j, cost, lat):
        """Lagrangian lower bounds of the node, one per multiplier, lazily."""
        if j >= self.m:
            yield cost
            return
        gi = self.group_of[j]
        _, _, end = self.groups[gi]
        slack = self.budget + _latency_slack(self.budget) - lat
        for k in range(len(self.lambdas)):
            cur = self._group_bound(k, j, end, self.open[gi])[0]
            yield cost + cur + self.fut[k][gi + 1] - self.lambdas[k] * slack

    def _bound(self, j, cost, lat) -> float:
        return max(self._bounds(j, cost, lat))

    # -- search ---------------------------------------------------------

    def run(self) -> VideoSolution:
        if not _latency_ok(self.minlat_suffix[0], self.budget):
            raise Infeasible(self.video.video_id,
                             f"delay threshold {self.cfg.delay_threshold} ms is below the local-serving floor")
        self.open = [set(s) for s in self.init_open]
        self.count = 1
        self.assign = [0] * self.m
        self.best_cost = self.best_plan = self.best_key = None
        self.nodes = 0
        exhausted = False
        for seed in self.seeds:
            plan = self._plan(seed)
            cost = self._assign_cost(seed)
            if _better(cost, plan.sort_key(), self.best_cost, self.best_key, self.cfg.tolerance):
                self.best_cost, self.best_key, self.best_plan = cost, plan.sort_key(), plan
        try:
            # The forced original copy is paid up front whether or not its quality is requested.
            self._dfs(0, float(self.fixed[self.video.broadcast_region]), 0.0)
        except _Stop:
            exhausted = True
        return VideoSolution(self.best_plan, math.nan, math.nan, self.nodes, not exhausted)

    def _assign_cost(self, assign) -> float:
        """Objective of a full assignment, accumulated as the search does."""
        cost = float(self.fixed[self.video.broadcast_region])
        opened = [set(s) for s in self.init_open]
        for j, r in enumerate(assign):
            group = opened[self.group_of[j]]
            cost += self.serve[j, r] + (0.0 if r in group else self.fixed[r])
            group.add(r)
        return cost

    def _plan(self, assign):
        video = self.video
        placements = {(video.original_quality, video.broadcast_region)}
        assignments = {}
        for j, r in enumerate(assign):
            placements.add((self.dq[j], r))
            assignments[self.dq[j], self.dw[j]] = r
        return AllocationPlan(frozenset(placements), assignments)

    def _prunable(self, lb) -> bool:
        if self.best_cost is None:
            return False
        tol = self.cfg.tolerance
        if lb > self.best_cost + tol:
            return True
        return lb >= self.best_cost - tol and self.count > self.best_key[0]

    def _dfs(self, j, cost, lat):
        self.nodes += 1
        if self.nodes > self.cfg.node_limit:
            raise _Stop
        if j == self.m:
            plan = self._plan(self.assign)
            key = plan.sort_key()
            if _better(cost, key, self.best_cost, self.best_key, self.cfg.tolerance):
                self.best_cost, self.best_key, self.best_plan = cost, key, plan
            return
        gi = self.group_of[j]
        open_set = self.open[gi]
        serve, latj = self.serve[j], self.lat[j]
        rest = self.minlat_suffix[j + 1]
        guide = self.guide
        options = []
        for r in range(self.n):
            new_lat = lat + latj[r]
            if not _latency_ok(new_lat + rest, self.budget):
                continue
            add = serve[r] + (0.0 if r in open_set else self.fixed[r])
            options.append((add + guide * latj[r], r, add, new_lat))
        options.sort()
        for _, r, add, new_lat in options:
            newly = r not in open_set
            if newly:
                open_set.add(r)
                self.count += 1
            self.assign[j] = r
            new_cost = cost + add
            if not any(self._prunable(lb) for lb in self._bounds(j + 1, new_cost, new_lat)):
                self._dfs(j + 1, new_cost, new_lat)
            if newly:
                open_set.discard(r)
                self.count -= 1


class _Stop(Exception):
    pass


def _finish(sol: VideoSolution, video, demand, rtt, prices) -> VideoSolution:
    cost = video_cost(sol.plan, video, demand, prices)
    return VideoSolution(sol.plan, cost, avg_latency(sol.plan, demand, rtt), sol.nodes, sol.proven_optimal)


def solve_video_detailed(video: VideoMeta, demand: DemandMatrix, rtt: RttMatrix, prices: PriceBook,
                         cfg: OptimizerConfig) -> VideoSolution:
    sol = _finish(_Search(video, demand, rtt, prices, cfg).run(), video, demand, rtt, prices)
    if not sol.proven_optimal:
        if cfg.on_node_limit == "raise":
            raise NodeLimitExceeded(video.video_id, sol)
        warnings.warn(f"video {video.video_id}: node limit {cfg.node_limit} reached, "
                      "returning best plan found", NodeLimitWarning, stacklevel=2)
    return sol


def solve_video(video: VideoMeta, demand: DemandMatrix, rtt: RttMatrix, prices: PriceBook,
                cfg: OptimizerConfig) -> AllocationPlan:
    """Cost-minimal plan for one video under the average-delay bound.

    Ties within ``cfg.tolerance`` go to fewer placements, then lower region
    indices. Raises :class:`Infeasible` when even all-local serving exceeds
    the bound.
    """
    return solve_video_detailed(video, demand, rtt, prices, cfg).plan


def brute_force_video(video: VideoMeta, demand: DemandMatrix, rtt: RttMatrix, prices: PriceBook,
                      cfg: OptimizerConfig, max_evaluations: int = 2_000_000) -> AllocationPlan:
    """Exhaustive reference solver for tiny instances.

    Enumerates every placement subset that contains the forced original copy,
    and every assignment of the demanded pairs onto the placed sites. Placements
    of qualities nobody requests are left out of the enumeration: they only add
    cost and placements, so they never win the cost-then-count ordering.
    """
    demand.check_against(video)
    qb, rb = video.original_quality, video.broadcast_region
    n = rtt.n
    forced = (qb, rb)
    qualities = sorted(demand.qualities())
    candidates = [(q, r) for q in qualities for r in range(n) if (q, r) != forced]
    pairs = sorted(((q, rw), p) for (rw, q), p in demand.items())
    total = demand.total_viewers
    budget = cfg.delay_threshold * total
    best, best_cost, best_key = None, None, None
    evaluations = 0
    for mask in range(1 << len(candidates)):
        placed = {forced} | {candidates[i] for i in range(len(candidates)) if mask >> i & 1}
        choices = [[r for r in range(n) if (q, r) in placed] for (q, _), _ in pairs]
        for combo in itertools.product(*choices):
            evaluations += 1
            if evaluations > max_evaluations:
                raise ExplosionGuard(f"more than {max_evaluations} candidate plans")
            lat = sum(p * rtt[r, rw] for ((q, rw), p), r in zip(pairs, combo))
            if not _latency_ok(lat, budget):
                continue
            plan = AllocationPlan(frozenset(placed), {qr: r for (qr, _), r in zip(pairs, combo)})
            if validate_plan(plan, video, demand):
                continue
            cost = video_cost(plan, video, demand, prices)
            key = plan.sort_key()
            if _better(cost, key, best_cost, best_key, cfg.tolerance):
                best, best_cost, best_key = plan, cost, key
    if best is None:
        raise Infeasible(video.video_id, "no plan meets the delay threshold")
    return best


@dataclass(frozen=True)
class SlotSolution:
    slot: int
    plans: Mapping
    instance_counts: tuple
    objective: float
    per_video_latency: Mapping
    per_video_cost: Mapping = field(default_factory=dict)
    unproven: tuple = ()

    def __post_init__(self):
        for name in ("plans", "per_video_latency", "per_video_cost"):
            object.__setattr__(self, name, MappingProxyType(dict(getattr(self, name))))
        object.__setattr__(self, "instance_counts", tuple(self.instance_counts))


def solve_slot(items: Sequence[tuple[VideoMeta, DemandMatrix]], rtt: RttMatrix, prices: PriceBook,
               cfg: OptimizerConfig, slot: int | None = None) -> SlotSolution:
    """Solve every video of one hourly slot and aggregate instance counts."""
    slots = {v.slot for v, _ in items}
    if len(slots) > 1:
        raise ValidationError(f"videos span several slots: {sorted(slots)}")
    if slot is None:
        slot = slots.pop() if slots else 0
    elif slots and slots != {slot}:
        raise ValidationError(f"videos belong to slot {slots.pop()}, not {slot}")
    plans, lat, costs, unproven = {}, {}, {}, []
    counts = [0] * rtt.n
    for video, demand in items:
        if video.video_id in plans:
            raise ValidationError(f"duplicate video id {video.video_id}")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NodeLimitWarning)
                sol = solve_video_detailed(video, demand, rtt, prices, cfg)
        except (Infeasible, NodeLimitExceeded, ValidationError) as exc:
            exc.args = (f"slot {slot}: {exc}",) + exc.args[1:]
            raise
        if not sol.proven_optimal:
            unproven.append(video.video_id)
            log.warning("slot %s video %s: node limit reached, plan not proven optimal", slot, video.video_id)
        plans[video.video_id] = sol.plan
        lat[video.video_id] = sol.latency
        costs[video.video_id] = sol.cost
        for _, r in sol.plan.placements:
            counts[r] += 1
    objective = math.fsum(costs.values())
    return SlotSolution(slot, plans, counts, objective, lat, costs, tuple(unproven))


def aggregate_instance_counts(solutions: Sequence[SlotSolution], n_regions: int | None = None) -> dict:
    """Per-region hourly instance series; input order is irrelevant, gaps are not."""
    ordered = sorted(solutions, key=lambda s: s.slot)
    if not ordered:
        return {r: InstanceSeries(r, ()) for r in range(n_regions or 0)}
    for a, b in zip(ordered, ordered[1:]):
        if b.slot != a.slot + 1:
            raise GapInHorizon(f"slots {a.slot} and {b.slot} are not contiguous")
    n = n_regions if n_regions is not None else len(ordered[0].instance_counts)
    return {r: InstanceSeries(r, tuple(s.instance_counts[r] for s in ordered), start=ordered[0].slot)
            for r in range(n)}


def write_instance_counts(solutions: Sequence[SlotSolution], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "region", "instance_count"])
        for s in sorted(solutions, key=lambda s: s.slot):
            for r, c in enumerate(s.instance_counts):
                w.writerow([s.slot, r, c])


def write_plans(solutions: Sequence[SlotSolution], placements_path, assignments_path) -> None:
    ordered = sorted(solutions, key=lambda s: s.slot)
    with open(placements_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "quality", "transcode_region"])
        for s in ordered:
            for vid in sorted(s.plans):
                for q, r in sorted(s.plans[vid].placements, key=lambda t: (t[1], t[0])):
                    w.writerow([vid, q.label, r])
    with open(assignments_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "quality", "viewer_region", "serving_region"])
        for s in ordered:
            for vid in sorted(s.plans):
                for (q, rw), rtr in s.plans[vid].assignments.items():
                    w.writerow([vid, q.label, rw, rtr])


def read_plans(placements_path, assignments_path) -> dict:
    """Inverse of :func:`write_plans`: ``video_id -> AllocationPlan``."""
    placements, assignments = {}, {}
    with open(placements_path, newline="") as fh:
        for row in csv.DictReader(fh):
            placements.setdefault(row["video_id"], set()).add(
                (Quality.parse(row["quality"]), int(row["transcode_region"])))
    with open(assignments_path, newline="") as fh:
        for row in csv.DictReader(fh):
            assignments.setdefault(row["video_id"], {})[
                Quality.parse(row["quality"]), int(row["viewer_region"])] = int(row["serving_region"])
    return {vid: AllocationPlan(frozenset(p), assignments.get(vid, {})) for vid, p in placements.items()}
