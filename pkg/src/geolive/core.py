"""Domain types shared by the optimizer, forecaster and online allocators.

Every type here is an immutable value object. Demand existence is never
stored: a (region, quality) pair is demanded iff its viewer count is positive.
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

INTRA_REGION_RTT_MS = 8.8


class ValidationError(ValueError):
    """Raised when an input violates a structural invariant."""


class Quality(enum.IntEnum):
    """Bitrate ladder, ordered from lowest to highest."""

    Q240 = 240
    Q360 = 360
    Q480 = 480
    Q720 = 720

    @property
    def label(self) -> str:
        return f"{self.value}p"

    @classmethod
    def parse(cls, value) -> "Quality":
        if isinstance(value, Quality):
            return value
        text = str(value).strip().lower().rstrip("p")
        try:
            return cls(int(text))
        except ValueError:
            raise ValidationError(f"unknown quality {value!r}") from None

    def __str__(self) -> str:
        return self.label


QUALITIES: tuple[Quality, ...] = tuple(Quality)

# Per-hour stream volume. Table values are used verbatim as GB so that
# per-GB transfer prices multiply directly.
DEFAULT_KAPPA: Mapping[Quality, float] = MappingProxyType({
    Quality.Q240: 0.405,
    Quality.Q360: 0.495,
    Quality.Q480: 0.603,
    Quality.Q720: 0.738,
})


def check_kappa(kappa: Mapping[Quality, float]) -> None:
    values = [kappa[q] for q in QUALITIES]
    if any(v <= 0 for v in values):
        raise ValidationError("kappa must be strictly positive")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValidationError("kappa must increase strictly with quality")


@dataclass(frozen=True)
class Region:
    index: int
    name: str
    lat: float
    lon: float

    def __post_init__(self):
        if self.index < 0:
            raise ValidationError("region index must be non-negative")
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise ValidationError(f"invalid coordinates for {self.name}")


class RttMatrix:
    """Round-trip delays in ms; ``d[tr, w]`` is the delay from site tr to viewers at w."""

    def __init__(self, delays):
        d = np.array(delays, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] < 1:
            raise ValidationError("RTT matrix must be square and non-empty")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValidationError("RTT entries must be finite and non-negative")
        diag = np.diag(d)
        if np.any(diag[:, None] > d) or np.any(diag[None, :] > d):
            raise ValidationError("local serving must never be slower than remote")
        d.setflags(write=False)
        self._d = d

    @property
    def n(self) -> int:
        return self._d.shape[0]

    @property
    def values(self) -> np.ndarray:
        return self._d

    def __getitem__(self, key):
        return self._d[key]

    def floor(self, region: int) -> float:
        return float(self._d[region, region])

    def __eq__(self, other):
        return isinstance(other, RttMatrix) and np.array_equal(self._d, other._d)

    def __repr__(self):
        return f"RttMatrix(n={self.n})"


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    slot: int
    broadcast_region: int
    original_quality: Quality

    def __post_init__(self):
        if self.slot < 0:
            raise ValidationError("slot must be non-negative")
        object.__setattr__(self, "original_quality", Quality.parse(self.original_quality))


class DemandMatrix(Mapping):
    """Viewer counts keyed by ``(viewer_region, quality)``; zero entries are dropped."""

    __slots__ = ("_counts", "_total")

    def __init__(self, counts: Mapping | Iterable = ()):
        items = counts.items() if isinstance(counts, Mapping) else counts
        merged: dict[tuple[int, Quality], int] = {}
        for (region, quality), p in items:
            if isinstance(p, float) and not p.is_integer():
                raise ValidationError(f"fractional viewer count {p!r}")
            if isinstance(p, (bool, str)) or int(p) != p:
                raise ValidationError(f"viewer count must be an integer, got {p!r}")
            p = int(p)
            if p < 0:
                raise ValidationError("viewer counts must be non-negative")
            if int(region) < 0:
                raise ValidationError("region index must be non-negative")
            if p:
                key = (int(region), Quality.parse(quality))
                merged[key] = merged.get(key, 0) + p
        self._counts = dict(sorted(merged.items()))
        self._total = sum(self._counts.values())

    def __getitem__(self, key):
        region, quality = key
        return self._counts.get((region, Quality.parse(quality)), 0)

    def __iter__(self):
        return iter(self._counts)

    def __len__(self):
        return len(self._counts)

    def __eq__(self, other):
        if isinstance(other, DemandMatrix):
            return self._counts == other._counts
        return NotImplemented

    def __hash__(self):
        return hash(tuple(self._counts.items()))

    def __repr__(self):
        body = ", ".join(f"({r}, {q.label}): {p}" for (r, q), p in self._counts.items())
        return f"DemandMatrix({{{body}}})"

    @property
    def total_viewers(self) -> int:
        return self._total

    def exists(self, region: int, quality) -> bool:
        return self[region, quality] > 0

    def qualities(self) -> set[Quality]:
        return {q for _, q in self._counts}

    def check_against(self, video: VideoMeta) -> None:
        for (r, q) in self._counts:
            if q > video.original_quality:
                raise ValidationError(
                    f"video {video.video_id}: {q.label} requested above broadcast "
                    f"quality {video.original_quality.label} in region {r}")


@dataclass(frozen=True, eq=True)
class AllocationPlan:
    """Placements ``{(quality, region)}`` and the serving region of every demanded pair.

    ``assignments`` maps ``(quality, viewer_region)`` to the serving region.
    """

    placements: frozenset
    assignments: Mapping = field(default_factory=dict)

    def __post_init__(self):
        placements = frozenset((Quality.parse(q), int(r)) for q, r in self.placements)
        assignments = {(Quality.parse(q), int(rw)): int(rtr)
                       for (q, rw), rtr in self.assignments.items()}
        object.__setattr__(self, "placements", placements)
        object.__setattr__(self, "assignments", MappingProxyType(dict(sorted(assignments.items()))))

    __hash__ = None

    def instances_in(self, region: int) -> int:
        return sum(1 for _, r in self.placements if r == region)

    def sort_key(self) -> tuple:
        """Deterministic tie-break key: fewer placements, then lowest region indices."""
        return (len(self.placements),
                tuple(sorted((r, int(q)) for q, r in self.placements)),
                tuple(self.assignments.values()))


def avg_latency(plan: AllocationPlan, demand: DemandMatrix, rtt: RttMatrix) -> float:
    """Viewer-weighted mean round-trip delay of one video's served demand.

    Returns 0.0 for a video without viewers.
    """
    for key in plan.assignments:
        if demand[key[1], key[0]] == 0:
            raise ValidationError(f"assignment for non-demanded pair {key[0].label}@{key[1]}")
    total = demand.total_viewers
    if total == 0:
        return 0.0
    # Grouping by delay keeps the uniform-delay case exact (weight 1.0).
    by_delay: dict[float, int] = defaultdict(int)
    for (rw, q), p in demand.items():
        try:
            rtr = plan.assignments[q, rw]
        except KeyError:
            raise ValidationError(f"demand {q.label}@{rw} has no serving region") from None
        by_delay[float(rtt[rtr, rw])] += p
    return math.fsum(d * (p / total) for d, p in sorted(by_delay.items()))


def validate_plan(plan: AllocationPlan, video: VideoMeta, demand: DemandMatrix) -> list[str]:
    """Structural constraint violations of ``plan``; empty iff the plan is valid."""
    violations = []
    qb, rb = video.original_quality, video.broadcast_region
    if (qb, rb) not in plan.placements:
        violations.append(f"origin: original {qb.label} not placed at broadcast region {rb}")
    for (q, rw), rtr in plan.assignments.items():
        if (q, rtr) not in plan.placements:
            violations.append(f"unplaced: {q.label}@{rw} served from {rtr} where {q.label} is not placed")
        if demand[rw, q] == 0:
            violations.append(f"unrequested: {q.label}@{rw} served but not requested")
    for (rw, q) in demand:
        if (q, rw) not in plan.assignments:
            violations.append(f"unserved: {q.label}@{rw} requested but not served")
    for q, r in sorted(plan.placements, key=lambda t: (t[1], t[0])):
        if q > qb:
            violations.append(f"above-origin: {q.label} placed at {r} above original {qb.label}")
    return violations
