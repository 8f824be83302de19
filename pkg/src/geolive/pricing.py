"""Region price book and the cost accounting used by both phases."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .core import DEFAULT_KAPPA, AllocationPlan, DemandMatrix, ValidationError, VideoMeta, check_kappa

# Reserved instances are priced at a quarter of on-demand by default,
# matching the best advertised reservation discount (75%).
DEFAULT_RESERVED_FACTOR = 0.25


@dataclass(frozen=True)
class PriceBook:
    """Per-region prices.

    zeta: on-demand instance ($/instance-hour), mu: reserved instance
    ($/instance-hour), eta: migration transfer charged by the broadcaster's
    region ($/GB), omega: serving transfer charged by the serving region ($/GB).
    """

    zeta: tuple
    mu: tuple
    eta: tuple
    omega: tuple
    kappa: Mapping = field(default=DEFAULT_KAPPA)

    def __post_init__(self):
        for name in ("zeta", "mu", "eta", "omega"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        n = len(self.zeta)
        if n == 0 or any(len(getattr(self, k)) != n for k in ("mu", "eta", "omega")):
            raise ValidationError("price vectors must be non-empty and of equal length")
        for name in ("zeta", "mu", "eta", "omega"):
            if any(not math.isfinite(x) or x < 0 for x in getattr(self, name)):
                raise ValidationError(f"{name} prices must be finite and non-negative")
        if any(m > z for m, z in zip(self.mu, self.zeta)):
            raise ValidationError("reserved price must not exceed on-demand price")
        check_kappa(self.kappa)

    @property
    def n(self) -> int:
        return len(self.zeta)

    @classmethod
    def from_on_demand(cls, zeta, eta, omega, reserved_factor=DEFAULT_RESERVED_FACTOR,
                       kappa=DEFAULT_KAPPA) -> "PriceBook":
        return cls(zeta, [reserved_factor * z for z in zeta], eta, omega, kappa)

    def with_reserved_factor(self, factor: float) -> "PriceBook":
        return PriceBook(self.zeta, [factor * z for z in self.zeta], self.eta, self.omega, self.kappa)


def read_price_book(path, kappa=DEFAULT_KAPPA) -> PriceBook:
    """Read ``region,zeta,mu,eta,omega`` rows; region is the integer index."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"region", "zeta", "mu", "eta", "omega"} - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                rows[int(row["region"])] = tuple(float(row[k]) for k in ("zeta", "mu", "eta", "omega"))
            except ValueError as exc:
                raise ValidationError(f"{path}:{line}: {exc}") from None
    if sorted(rows) != list(range(len(rows))):
        raise ValidationError(f"{path}: region indices must be dense from 0")
    cols = list(zip(*(rows[i] for i in range(len(rows)))))
    return PriceBook(*cols, kappa=kappa)


def write_price_book(prices: PriceBook, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "zeta", "mu", "eta", "omega"])
        for r in range(prices.n):
            w.writerow([r, repr(prices.zeta[r]), repr(prices.mu[r]), repr(prices.eta[r]), repr(prices.omega[r])])


def rental_cost(plans: Iterable[AllocationPlan], prices: PriceBook) -> float:
    return math.fsum(prices.zeta[r] for plan in plans for _, r in plan.placements)


def migration_cost(plans: Sequence[AllocationPlan], videos: Sequence[VideoMeta], prices: PriceBook) -> float:
    # Every placement pays for a copy of the original stream, including the
    # one hosted in the broadcaster's own region.
    terms = []
    for plan, video in zip(plans, videos, strict=True):
        per_copy = prices.eta[video.broadcast_region] * prices.kappa[video.original_quality]
        terms.extend([per_copy] * len(plan.placements))
    return math.fsum(terms)


def serving_cost(plans: Sequence[AllocationPlan], demands: Sequence[DemandMatrix], prices: PriceBook) -> float:
    terms = []
    for plan, demand in zip(plans, demands, strict=True):
        for (q, rw), rtr in plan.assignments.items():
            terms.append(prices.omega[rtr] * prices.kappa[q] * demand[rw, q])
    return math.fsum(terms)


def total_cost(plans, videos, demands, prices: PriceBook) -> float:
    plans = list(plans)
    return (rental_cost(plans, prices)
            + migration_cost(plans, list(videos), prices)
            + serving_cost(plans, list(demands), prices))


def video_cost(plan: AllocationPlan, video: VideoMeta, demand: DemandMatrix, prices: PriceBook) -> float:
    """One video's contribution to the total cost."""
    return total_cost([plan], [video], [demand], prices)


def phase2_cost(reserved: Sequence[int], on_demand_used: Sequence[int], plans, videos, demands,
                prices: PriceBook) -> float:
    """Cost of an online slot: reserved stock is paid whether used or not."""
    plans = list(plans)
    if len(reserved) != prices.n or len(on_demand_used) != prices.n:
        raise ValidationError("per-region counts must cover every region")
    rent = math.fsum([prices.mu[r] * reserved[r] for r in range(prices.n)]
                     + [prices.zeta[r] * on_demand_used[r] for r in range(prices.n)])
    return rent + migration_cost(plans, list(videos), prices) + serving_cost(plans, list(demands), prices)

