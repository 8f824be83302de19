"""Random tiny optimizer instances shared by the oracle tests."""

import random

from hypothesis import strategies as st

from geolive.core import QUALITIES, DemandMatrix, RttMatrix, VideoMeta
from geolive.pricing import PriceBook

DELAYS = (8.8, 20.0, 60.0, 120.0, 200.0)
ZETAS = (0.05, 0.085, 0.1, 0.131)
ETAS = (0.0, 0.02, 0.09, 0.138)
OMEGAS = (0.05, 0.09, 0.12, 0.15)


def random_instance(rng: random.Random, max_regions=3, max_qualities=2, max_pairs=6):
    n = rng.randint(1, max_regions)
    d = [[8.8] * n for _ in range(n)]
    for a in range(n):
        for b in range(a + 1, n):
            d[a][b] = d[b][a] = rng.choice(DELAYS)
    zeta = [rng.choice(ZETAS) for _ in range(n)]
    prices = PriceBook.from_on_demand(zeta, [rng.choice(ETAS) for _ in range(n)], [rng.choice(OMEGAS) for _ in range(n)])
    qualities = rng.sample(QUALITIES, rng.randint(1, max_qualities))
    qb = max(qualities) if rng.random() < 0.7 else QUALITIES[-1]
    cells = [(r, q) for r in range(n) for q in qualities]
    pairs = rng.sample(cells, rng.randint(0, min(max_pairs, len(cells))))
    demand = DemandMatrix({cell: rng.randint(1, 12) for cell in pairs})
    video = VideoMeta("v", 0, rng.randrange(n), qb)
    delay = rng.choice((8.8, 30.0, 60.0, 120.0, 180.0))
    return video, demand, RttMatrix(d), prices, delay


seeds = st.integers(0, 2**32 - 1)
