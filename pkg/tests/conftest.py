import pytest
from hypothesis import HealthCheck, settings

from geolive.core import DemandMatrix, Quality, RttMatrix, VideoMeta
from geolive.pricing import PriceBook

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def two_region():
    """Broadcast 720p in A, 10 viewers of 720p in B, 100 ms apart."""
    rtt = RttMatrix([[8.8, 100.0], [100.0, 8.8]])
    prices = PriceBook.from_on_demand([0.10, 0.05], [0.02, 0.0], [0.09, 0.05])
    video = VideoMeta("v", 0, 0, Quality.Q720)
    demand = DemandMatrix({(1, Quality.Q720): 10})
    return video, demand, rtt, prices


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
