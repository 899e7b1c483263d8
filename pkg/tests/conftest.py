import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from agmm.data import Dataset, Rng

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def make_dataset(n=200, d=1, seed=0):
    rng = Rng(seed)
    x = rng.normal((n, d))
    w = x[:, 0] + 0.5 * rng.normal(n)
    y = np.sin(w) + 0.1 * rng.normal(n)
    return Dataset(y, w, x)


@pytest.fixture
def small_ds():
    return make_dataset()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
