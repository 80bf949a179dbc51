import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from graphfetch.trace import SynthConfig, generate_synthetic_trace

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_trace():
    return generate_synthetic_trace(SynthConfig(iterations=2, scatter_len=1200, gather_len=1200), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
