"""Slot-indexed livestream workloads: default region catalog, synthetic
generation, trace ingestion and the long-form workload CSV."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Sequence

import numpy as np

from .core import INTRA_REGION_RTT_MS, QUALITIES, DemandMatrix, Quality, Region, RttMatrix, ValidationError, VideoMeta
from .pricing import PriceBook

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088

# name, lat, lon, on-demand $/h (c5.large), migration $/GB, serving $/GB
_DEFAULT_SITES = [
    ("US West-California", 37.35, -121.96, 0.106, 0.02, 0.09),
    ("US East-Virginia", 38.13, -78.45, 0.085, 0.02, 0.09),
    ("US East-Ohio", 40.42, -82.91, 0.085, 0.02, 0.09),
    ("South America-Sao Paulo", -23.55, -46.63, 0.131, 0.138, 0.15),
    ("Europe-Paris", 48.86, 2.35, 0.101, 0.02, 0.09),
    ("Europe-Frankfurt", 50.11, 8.68, 0.097, 0.02, 0.09),
    ("China-Ningxia", 37.20, 106.17, 0.100, 0.09, 0.13),
    ("Asia-Singapore", 1.35, 103.82, 0.098, 0.09, 0.12),
    ("Asia-Seoul", 37.57, 126.98, 0.096, 0.08, 0.126),
    ("Asia-Mumbai", 19.08, 72.88, 0.085, 0.086, 0.1093),
]

# Propagation-plus-routing slope fitted to typical inter-region pings.
RTT_MS_PER_KM = 0.015


def default_catalog() -> list[Region]:
    return [Region(i, name, lat, lon) for i, (name, lat, lon, *_rest) in enumerate(_DEFAULT_SITES)]


def default_prices(reserved_factor: float = 0.25) -> PriceBook:
    zeta = [s[3] for s in _DEFAULT_SITES]
    eta = [s[4] for s in _DEFAULT_SITES]
    omega = [s[5] for s in _DEFAULT_SITES]
    return PriceBook.from_on_demand(zeta, eta, omega, reserved_factor)


def haversine_km(lat1, lon1, lat2, lon2) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlmb = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def rtt_from_catalog(catalog: Sequence[Region], floor_ms: float = INTRA_REGION_RTT_MS,
                     ms_per_km: float = RTT_MS_PER_KM) -> RttMatrix:
    n = len(catalog)
    d = np.empty((n, n))
    for i, a in enumerate(catalog):
        for j, b in enumerate(catalog):
            d[i, j] = floor_ms if i == j else round(floor_ms + ms_per_km * haversine_km(a.lat, a.lon, b.lat, b.lon), 1)
    return RttMatrix(d)


def default_rtt() -> RttMatrix:
    return rtt_from_catalog(default_catalog())


def map_to_region(lat: float, lon: float, catalog: Sequence[Region]) -> int:
    """Great-circle nearest site; exact ties go to the lowest index."""
    if not catalog:
        raise ValidationError("empty region catalog")
    if not (-90 <= lat <= 90 and -180 <= lon <= 180):
        raise ValidationError(f"invalid coordinates ({lat}, {lon})")
    best, best_d = None, math.inf
    for region in sorted(catalog, key=lambda r: r.index):
        dist = haversine_km(lat, lon, region.lat, region.lon)
        if dist < best_d - 1e-9:
            best, best_d = region.index, dist
    return best


def classify_bitrate(width: float, height: float) -> Quality:
    """Nearest ladder rung to the frame height; ties round up, 720p caps."""
    if width <= 0 or height <= 0:
        raise ValidationError(f"non-positive frame size {width}x{height}")
    best = min(QUALITIES, key=lambda q: (abs(height - q.value), -q.value))
    return best


@dataclass
class Workload:
    """Videos with their demand, bucketed by hourly slot."""

    horizon: int
    slots: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.slots) < self.horizon:
            self.slots = list(self.slots) + [[] for _ in range(self.horizon - len(self.slots))]
        if len(self.slots) != self.horizon:
            raise ValidationError("more slots than the horizon")

    def __iter__(self):
        return iter(self.slots)

    def __getitem__(self, t):
        return self.slots[t]

    def __eq__(self, other):
        return isinstance(other, Workload) and self.horizon == other.horizon and self.slots == other.slots

    def videos(self):
        for items in self.slots:
            yield from items

    def validate(self):
        seen = set()
        for t, items in enumerate(self.slots):
            for video, demand in items:
                if video.slot != t:
                    raise ValidationError(f"video {video.video_id} is in slot {t} but says {video.slot}")
                if video.video_id in seen:
                    raise ValidationError(f"duplicate video id {video.video_id}")
                seen.add(video.video_id)
                demand.check_against(video)


DEFAULT_PROFILE = (12, 9, 7, 6, 6, 7, 9, 12, 15, 18, 20, 22, 23, 24, 24, 25, 26, 27, 28, 27, 25, 22, 18, 15)


@dataclass(frozen=True)
class WorkloadConfig:
    """Synthetic workload knobs.

    ``videos_per_hour`` gives the arrivals for each hour of the day; integral
    entries are reproduced exactly, fractional parts are drawn as Bernoulli.
    Viewers pick a video with Zipf(``zipf_exponent``) popularity over a
    random ranking of the hour's videos. ``home_bias`` is the share of a
    video's viewers placed in the broadcaster's own region.
    """

    horizon: int = 48
    videos_per_hour: tuple = DEFAULT_PROFILE
    zipf_exponent: float = 1.0
    mean_viewers: float = 15.0
    min_viewers: int = 1
    home_bias: float = 0.5
    broadcaster_weights: tuple = (0.10, 0.16, 0.10, 0.10, 0.08, 0.08, 0.10, 0.10, 0.08, 0.10)
    viewer_weights: tuple = (0.10, 0.14, 0.10, 0.10, 0.08, 0.08, 0.10, 0.10, 0.08, 0.12)
    broadcast_quality_mix: tuple = (0.10, 0.25, 0.30, 0.35)
    quality_mix: tuple = ((0.15, 0.25, 0.30, 0.30),) * 10
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 0:
            raise ValidationError("horizon must be non-negative")
        if len(self.videos_per_hour) != 24:
            raise ValidationError("videos_per_hour needs 24 values")
        n = len(self.broadcaster_weights)
        if len(self.viewer_weights) != n or len(self.quality_mix) != n:
            raise ValidationError("region weight vectors disagree on region count")
        vectors = [self.videos_per_hour, self.broadcaster_weights, self.viewer_weights,
                   self.broadcast_quality_mix, *self.quality_mix]
        if any(x < 0 for vec in vectors for x in vec):
            raise ValidationError("weights and profiles must be non-negative")
        if any(len(mix) != 4 or sum(mix) <= 0 for mix in [self.broadcast_quality_mix, *self.quality_mix]):
            raise ValidationError("quality mixes need 4 non-negative entries with positive sum")
        if sum(self.broadcaster_weights) <= 0 or sum(self.viewer_weights) <= 0:
            raise ValidationError("region weights must have positive sum")
        if not 0 <= self.home_bias <= 1:
            raise ValidationError("home_bias must lie in [0, 1]")
        if self.zipf_exponent < 0 or self.mean_viewers < 0 or self.min_viewers < 0:
            raise ValidationError("zipf exponent and viewer counts must be non-negative")

    @property
    def n_regions(self) -> int:
        return len(self.broadcaster_weights)


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=float)
    w = ranks ** -exponent
    return w / w.sum()


def _normalized(v) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    return a / a.sum()


def generate(config: WorkloadConfig) -> Workload:
    """Deterministic synthetic workload for ``config`` (seed included)."""
    rng = np.random.default_rng(config.seed)
    n = config.n_regions
    b_weights = _normalized(config.broadcaster_weights)
    v_weights = _normalized(config.viewer_weights)
    bq_mix = _normalized(config.broadcast_quality_mix)
    q_mix = [_normalized(m) for m in config.quality_mix]
    slots = []
    for t in range(config.horizon):
        expected = float(config.videos_per_hour[t % 24])
        count = int(math.floor(expected))
        frac = expected - count
        if frac > 0 and rng.random() < frac:
            count += 1
        items = []
        if count:
            ranks = rng.permutation(count)
            pool = int(round(config.mean_viewers * count)) - config.min_viewers * count
            extra = rng.multinomial(max(pool, 0), zipf_weights(count, config.zipf_exponent))
            for k in range(count):
                rb = int(rng.choice(n, p=b_weights))
                qb = QUALITIES[int(rng.choice(4, p=bq_mix))]
                total = config.min_viewers + int(extra[ranks[k]])
                region_p = config.home_bias * np.eye(n)[rb] + (1 - config.home_bias) * v_weights
                per_region = rng.multinomial(total, region_p)
                counts = {}
                for rw in range(n):
                    if per_region[rw] == 0:
                        continue
                    per_q = rng.multinomial(int(per_region[rw]), q_mix[rw])
                    for qi, p in enumerate(per_q):
                        if p:
                            q = min(QUALITIES[qi], qb)
                            counts[rw, q] = counts.get((rw, q), 0) + int(p)
                video = VideoMeta(f"v{t:05d}-{k:04d}", t, rb, qb)
                items.append((video, DemandMatrix(counts)))
        slots.append(items)
    return Workload(config.horizon, slots)


LONG_COLUMNS = ["video_id", "slot", "broadcast_region", "original_quality",
                "viewer_region", "requested_quality", "viewers"]
TRACE_COLUMNS = ["video_id", "creation_time", "broadcaster_lat", "broadcaster_lon", "width", "height",
                 "viewer_lat", "viewer_lon", "requested_quality", "viewers"]


def write_workload_csv(workload: Workload, path) -> None:
    """Long form, one row per demanded pair; viewer-less videos get one empty row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_COLUMNS)
        for video, demand in workload.videos():
            head = [video.video_id, video.slot, video.broadcast_region, video.original_quality.label]
            if not demand:
                w.writerow(head + ["", "", 0])
            for (rw, q), p in demand.items():
                w.writerow(head + [rw, q.label, p])


def _parse_time(text: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    stamp = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def ingest_csv(path, catalog: Sequence[Region] | None = None, horizon: int | None = None) -> Workload:
    """Read either the long-form workload CSV or a raw trace CSV.

    Trace rows carry broadcaster/viewer coordinates, the creation time and
    frame size; they are bucketed into hourly slots from the first creation
    hour, mapped to the nearest site and classified by bitrate. Requested
    qualities above the broadcast quality are clamped down with a warning.
    Malformed rows raise with their line number.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = set(reader.fieldnames or ())
        if set(LONG_COLUMNS) <= header:
            rows = list(_long_rows(reader, path))
        elif set(TRACE_COLUMNS) - {"requested_quality"} <= header:
            rows = list(_trace_rows(reader, path, catalog if catalog is not None else default_catalog()))
        else:
            missing = sorted(set(LONG_COLUMNS) - header)
            raise ValidationError(f"{path}: missing required columns {missing}")
    videos: dict[str, VideoMeta] = {}
    counts: dict[str, dict] = {}
    for line, video, rw, q, p in rows:
        known = videos.setdefault(video.video_id, video)
        if known != video:
            raise ValidationError(f"{path}:{line}: conflicting metadata for video {video.video_id}")
        bucket = counts.setdefault(video.video_id, {})
        if rw is None:
            continue
        if q > video.original_quality:
            log.warning("%s:%d: %s requested above broadcast %s for %s; clamped",
                        path, line, q.label, video.original_quality.label, video.video_id)
            q = video.original_quality
        bucket[rw, q] = bucket.get((rw, q), 0) + p
    last = max((v.slot for v in videos.values()), default=-1)
    size = horizon if horizon is not None else last + 1
    if last >= size:
        raise ValidationError(f"{path}: slot {last} beyond horizon {size}")
    slots = [[] for _ in range(size)]
    for vid, video in videos.items():
        slots[video.slot].append((video, DemandMatrix(counts[vid])))
    for items in slots:
        items.sort(key=lambda vd: vd[0].video_id)
    return Workload(size, slots)


def _long_rows(reader, path):
    for line, row in enumerate(reader, start=2):
        try:
            video = VideoMeta(row["video_id"], int(row["slot"]), int(row["broadcast_region"]),
                              Quality.parse(row["original_quality"]))
            p = int(row["viewers"])
            if row["viewer_region"].strip() == "":
                if p != 0:
                    raise ValueError("viewers without a viewer region")
                yield line, video, None, None, 0
                continue
            yield line, video, int(row["viewer_region"]), Quality.parse(row["requested_quality"]), p
        except (ValueError, KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{line}: malformed row ({exc})") from None


def _trace_rows(reader, path, catalog):
    parsed = []
    for line, row in enumerate(reader, start=2):
        try:
            created = _parse_time(row["creation_time"])
            rb = map_to_region(float(row["broadcaster_lat"]), float(row["broadcaster_lon"]), catalog)
            qb = classify_bitrate(float(row["width"]), float(row["height"]))
            p = int(row["viewers"])
            rw = None
            q = None
            if row["viewer_lat"].strip() != "" and p > 0:
                rw = map_to_region(float(row["viewer_lat"]), float(row["viewer_lon"]), catalog)
                requested = (row.get("requested_quality") or "").strip()
                q = Quality.parse(requested) if requested else qb
            parsed.append((line, row["video_id"], created, rb, qb, rw, q, p))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{line}: malformed row ({exc})") from None
    if not parsed:
        return
    origin = math.floor(min(c for _, _, c, *_ in parsed) / 3600.0) * 3600.0
    for line, vid, created, rb, qb, rw, q, p in parsed:
        video = VideoMeta(vid, int((created - origin) // 3600), rb, qb)
        yield line, video, rw, q, p if rw is not None else 0


def write_catalog_csv(catalog: Sequence[Region], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "name", "lat", "lon"])
        for r in catalog:
            w.writerow([r.index, r.name, r.lat, r.lon])


def read_catalog_csv(path) -> list[Region]:
    with open(path, newline="") as fh:
        regions = [Region(int(row["region"]), row["name"], float(row["lat"]), float(row["lon"]))
                   for row in csv.DictReader(fh)]
    if sorted(r.index for r in regions) != list(range(len(regions))):
        raise ValidationError(f"{path}: region indices must be dense from 0")
    if len({r.name for r in regions}) != len(regions):
        raise ValidationError(f"{path}: region names must be unique")
    return sorted(regions, key=lambda r: r.index)


def write_rtt_csv(rtt: RttMatrix, names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(names))
        for i, name in enumerate(names):
            w.writerow([name] + [repr(float(x)) for x in rtt[i]])


def read_rtt_csv(path) -> tuple[RttMatrix, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    body = rows[1:]
    if [r[0] for r in body] != names:
        raise ValidationError(f"{path}: row and column region names differ")
    return RttMatrix([[float(x) for x in r[1:]] for r in body]), names
