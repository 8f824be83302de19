"""Online per-slot allocation on reserved and on-demand capacity.

Three greedy policies share one engine:

* GNCA serves from the nearest region holding a usable instance, may
  dissatisfy a bounded share of a video's viewers to stay on reserved
  capacity, and only then rents the cheapest on-demand instance within D.
* GCA is GNCA with the reserved phases ordered by price instead of delay.
* GMC ignores reservations and rents the cheapest instance within D.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .core import AllocationPlan, DemandMatrix, Quality, RttMatrix, ValidationError, VideoMeta
from .pricing import PriceBook, phase2_cost

DEFAULT_ON_DEMAND_LIMIT = 500

RESERVED = "reserved"
ON_DEMAND = "ondemand"

ALGORITHMS = ("GNCA", "GCA", "GMC")


class CapacityLedger:
    """Per-region reserved stock and hourly on-demand allowance for one slot."""

    def __init__(self, reserved: Sequence[int], on_demand_limit: int | Sequence[int] = DEFAULT_ON_DEMAND_LIMIT):
        reserved = [int(x) for x in reserved]
        if isinstance(on_demand_limit, int):
            limits = [on_demand_limit] * len(reserved)
        else:
            limits = [int(x) for x in on_demand_limit]
        if len(limits) != len(reserved):
            raise ValidationError("reserved and on-demand vectors disagree on region count")
        if any(x < 0 for x in reserved) or any(x < 0 for x in limits):
            raise ValidationError("capacities must be non-negative")
        self.reserved_initial = tuple(reserved)
        self.on_demand_limit = tuple(limits)
        self.reserved_remaining = list(reserved)
        self.on_demand_remaining = list(limits)
        self.on_demand_used = [0] * len(reserved)

    @property
    def n(self) -> int:
        return len(self.reserved_initial)

    @property
    def reserved_used(self) -> list[int]:
        return [a - b for a, b in zip(self.reserved_initial, self.reserved_remaining)]

    def take_reserved(self, r: int) -> None:
        if self.reserved_remaining[r] <= 0:
            raise ValidationError(f"no reserved capacity left in region {r}")
        self.reserved_remaining[r] -= 1

    def take_on_demand(self, r: int) -> None:
        if self.on_demand_remaining[r] <= 0:
            raise ValidationError(f"on-demand limit reached in region {r}")
        self.on_demand_remaining[r] -= 1
        self.on_demand_used[r] += 1

    def fresh_copy(self) -> "CapacityLedger":
        """Untouched ledger with the same initial stock."""
        return CapacityLedger(self.reserved_initial, self.on_demand_limit)

    def check(self) -> None:
        for r in range(self.n):
            if self.reserved_remaining[r] < 0 or self.on_demand_remaining[r] < 0:
                raise ValidationError(f"negative capacity in region {r}")
            if self.on_demand_used[r] + self.on_demand_remaining[r] != self.on_demand_limit[r]:
                raise ValidationError(f"on-demand accounting broken in region {r}")


@dataclass(frozen=True)
class AllocatorConfig:
    delay_threshold: float
    diss_threshold: float = 0.0
    # "post": guard on DVN after adding the demand (never overshoots).
    # "pre": guard on DVN before adding it, as the greedy loop is literally written.
    diss_check: str = "post"

    def __post_init__(self):
        if not self.delay_threshold >= 0:
            raise ValidationError("delay threshold must be non-negative")
        if not 0 <= self.diss_threshold <= 100:
            raise ValidationError("diss threshold must lie in [0, 100]")
        if self.diss_check not in ("post", "pre"):
            raise ValidationError("diss_check must be 'post' or 'pre'")


@dataclass(frozen=True)
class ServedDemand:
    video_id: str
    quality: Quality
    viewer_region: int
    serving_region: int
    viewers: int
    satisfied: bool
    kind: str
    phase: str


@dataclass
class SlotOutcome:
    algorithm: str
    slot: int | None = None
    placements: dict = field(default_factory=dict)  # (video_id, quality, region) -> kind
    served: list = field(default_factory=list)
    unserved: list = field(default_factory=list)  # (video_id, quality, viewer_region, viewers)
    cvn: dict = field(default_factory=dict)
    dvn: dict = field(default_factory=dict)

    def plans(self, videos: Sequence[VideoMeta]) -> list[AllocationPlan]:
        by_video = {v.video_id: (set(), {}) for v in videos}
        for (vid, q, r) in self.placements:
            by_video[vid][0].add((q, r))
        for s in self.served:
            by_video[s.video_id][1][s.quality, s.viewer_region] = s.serving_region
        return [AllocationPlan(frozenset(by_video[v.video_id][0]), by_video[v.video_id][1]) for v in videos]

    def phase_counts(self) -> dict:
        counts = {"1": 0, "2": 0, "3": 0, "fallback": 0}
        for s in self.served:
            counts[s.phase] += 1
        return counts


def rank_videos(items):
    """Videos by total viewers, most popular first; ties by ascending id."""
    return sorted(items, key=lambda vd: (-vd[1].total_viewers, vd[0].video_id))


def _demand_order(demand: DemandMatrix):
    return sorted(demand.items(), key=lambda kv: (kv[0][0], -kv[0][1]))


class _Engine:
    def __init__(self, algorithm, ledger: CapacityLedger, rtt: RttMatrix, prices: PriceBook, cfg: AllocatorConfig,
                 slot=None):
        if ledger.n != rtt.n or prices.n != rtt.n:
            raise ValidationError("ledger, RTT and prices disagree on region count")
        self.ledger = ledger
        self.rtt = rtt
        self.prices = prices
        self.cfg = cfg
        self.out = SlotOutcome(algorithm, slot)
        self.by_price = sorted(range(rtt.n), key=lambda r: (prices.zeta[r], r))
        self.threshold = Fraction(str(cfg.diss_threshold))

    def by_delay(self, rw):
        return sorted(range(self.rtt.n), key=lambda r: (float(self.rtt[r, rw]), r))

    def within(self, r, rw) -> bool:
        return float(self.rtt[r, rw]) <= self.cfg.delay_threshold

    def placed(self, vid, q, r) -> bool:
        return (vid, q, r) in self.out.placements

    def usable_reserved(self, vid, q, r) -> bool:
        return self.placed(vid, q, r) or self.ledger.reserved_remaining[r] > 0

    def diss_allowed(self, vid, p) -> bool:
        cvn, dvn = self.out.cvn[vid], self.out.dvn[vid]
        if self.cfg.diss_check == "post":
            dvn += p
        return dvn * 100 <= self.threshold * cvn

    def use(self, vid, q, rw, r, p, prefer, phase):
        """Serve ``(q, rw)`` from ``r``, reusing or creating an instance there."""
        key = (vid, q, r)
        if key not in self.out.placements:
            if prefer == RESERVED and self.ledger.reserved_remaining[r] > 0:
                self.ledger.take_reserved(r)
                self.out.placements[key] = RESERVED
            elif self.ledger.on_demand_remaining[r] > 0:
                self.ledger.take_on_demand(r)
                self.out.placements[key] = ON_DEMAND
            else:
                self.ledger.take_reserved(r)
                self.out.placements[key] = RESERVED
        satisfied = self.within(r, rw)
        if not satisfied:
            self.out.dvn[vid] += p
        self.out.served.append(ServedDemand(vid, q, rw, r, p, satisfied, self.out.placements[key], phase))

    def fallback(self, vid, q, rw, p, reserved_ok=True) -> None:
        led = self.ledger
        for r in self.by_price:
            stock = reserved_ok and led.reserved_remaining[r] > 0
            if self.placed(vid, q, r) or stock or led.on_demand_remaining[r] > 0:
                self.use(vid, q, rw, r, p, RESERVED if reserved_ok else ON_DEMAND, "fallback")
                return
        self.out.unserved.append((vid, q, rw, p))

    def reserved_pass(self, vid, q, rw, p, order) -> None:
        self.out.cvn[vid] += p
        for r in order:
            if self.within(r, rw) and self.usable_reserved(vid, q, r):
                self.use(vid, q, rw, r, p, RESERVED, "1")
                return
        if self.diss_allowed(vid, p):
            for r in order:
                if self.usable_reserved(vid, q, r):
                    self.use(vid, q, rw, r, p, RESERVED, "2")
                    return
        for r in self.by_price:
            if self.within(r, rw) and self.ledger.on_demand_remaining[r] > 0:
                self.use(vid, q, rw, r, p, ON_DEMAND, "3")
                return
        self.fallback(vid, q, rw, p)

    def on_demand_pass(self, vid, q, rw, p) -> None:
        self.out.cvn[vid] += p
        # Reuse comes first so that new instances are created exactly when the
        # reservation-based policies would create them with an empty stock.
        for r in self.by_price:
            if self.within(r, rw) and self.placed(vid, q, r):
                self.use(vid, q, rw, r, p, ON_DEMAND, "1")
                return
        for r in self.by_price:
            if self.within(r, rw) and self.ledger.on_demand_remaining[r] > 0:
                self.use(vid, q, rw, r, p, ON_DEMAND, "3")
                return
        self.fallback(vid, q, rw, p, reserved_ok=False)

    def run(self, ranked, step) -> SlotOutcome:
        seen = set()
        for video, demand in ranked:
            vid = video.video_id
            if vid in seen:
                raise ValidationError(f"duplicate video id {vid}")
            seen.add(vid)
            demand.check_against(video)
            self.out.cvn[vid] = 0
            self.out.dvn[vid] = 0
            for (rw, q), p in _demand_order(demand):
                if not 0 <= rw < self.rtt.n:
                    raise ValidationError(f"viewer region {rw} out of range for {vid}")
                step(vid, q, rw, p)
        return self.out


def gnca_allocate_slot(ranked, ledger, rtt, prices, cfg, slot=None) -> SlotOutcome:
    """Nearest reserved first, bounded dissatisfaction, then cheapest on-demand."""
    eng = _Engine("GNCA", ledger, rtt, prices, cfg, slot)
    return eng.run(ranked, lambda vid, q, rw, p: eng.reserved_pass(vid, q, rw, p, eng.by_delay(rw)))


def gca_allocate_slot(ranked, ledger, rtt, prices, cfg, slot=None) -> SlotOutcome:
    """GNCA with the reserved phases scanning regions by on-demand price."""
    eng = _Engine("GCA", ledger, rtt, prices, cfg, slot)
    return eng.run(ranked, lambda vid, q, rw, p: eng.reserved_pass(vid, q, rw, p, eng.by_price))


def gmc_allocate_slot(ranked, ledger, rtt, prices, cfg, slot=None) -> SlotOutcome:
    """Cheapest on-demand instance within the delay bound."""
    eng = _Engine("GMC", ledger, rtt, prices, cfg, slot)
    return eng.run(ranked, eng.on_demand_pass)


ALLOCATORS = {"GNCA": gnca_allocate_slot, "GCA": gca_allocate_slot, "GMC": gmc_allocate_slot}


@dataclass(frozen=True)
class SlotMetrics:
    slot: int
    algorithm: str
    total_cost: float
    avg_latency_ms: float
    hit_pct: float
    on_demand_pct: float
    diss_pct: float
    unserved: int

    def row(self) -> list:
        return [self.slot, self.algorithm, repr(self.total_cost), repr(self.avg_latency_ms), repr(self.hit_pct),
                repr(self.on_demand_pct), repr(self.diss_pct), self.unserved]


METRIC_COLUMNS = ["slot", "algorithm", "total_cost", "avg_latency_ms", "hit_pct", "on_demand_pct", "diss_pct",
                  "unserved"]


def compute_slot_metrics(outcome: SlotOutcome, items, ledger: CapacityLedger, rtt: RttMatrix,
                         prices: PriceBook) -> SlotMetrics:
    """Cost and service quality of one allocated slot.

    Percentages are shares of served viewers; unserved viewers are counted
    separately. Reserved stock is charged in full whether used or not.
    """
    videos = [v for v, _ in items]
    demands = [d for _, d in items]
    cost = phase2_cost(ledger.reserved_initial, ledger.on_demand_used, outcome.plans(videos), videos, demands, prices)
    served = sum(s.viewers for s in outcome.served)
    unserved = sum(p for *_, p in outcome.unserved)
    if served == 0:
        return SlotMetrics(outcome.slot, outcome.algorithm, cost, 0.0, 0.0, 0.0, 0.0, unserved)
    by_delay: dict[float, int] = {}
    hit = od = diss = 0
    for s in outcome.served:
        d = float(rtt[s.serving_region, s.viewer_region])
        by_delay[d] = by_delay.get(d, 0) + s.viewers
        hit += s.viewers if s.serving_region == s.viewer_region else 0
        od += s.viewers if s.kind == ON_DEMAND else 0
        diss += 0 if s.satisfied else s.viewers
    latency = math.fsum(d * (p / served) for d, p in sorted(by_delay.items()))
    return SlotMetrics(outcome.slot, outcome.algorithm, cost, latency,
                       100.0 * hit / served, 100.0 * od / served, 100.0 * diss / served, unserved)


def write_outcome_csv(outcome: SlotOutcome, placements_path, served_path) -> None:
    with open(placements_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "quality", "region", "kind"])
        for (vid, q, r), kind in outcome.placements.items():
            w.writerow([vid, q.label, r, kind])
    with open(served_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "quality", "viewer_region", "serving_region", "satisfied"])
        for s in outcome.served:
            w.writerow([s.video_id, s.quality.label, s.viewer_region, s.serving_region, int(s.satisfied)])


def write_metrics_csv(rows: Sequence[SlotMetrics], path, extra: dict | None = None) -> None:
    """Metrics rows; ``extra`` prepends constant columns such as the grid point."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(extra) + METRIC_COLUMNS)
        for m in rows:
            w.writerow(list(extra.values()) + m.row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
