import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cacheidx.index import build_sorted_index
from cacheidx.rng import KeyStream

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def index_100k():
    return build_sorted_index(KeyStream(11, 0).take(100_000))


@pytest.fixture(scope="session")
def queries_100k():
    return KeyStream(11, 1).take(100_000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria append (criterion, passed, detail) here; printed at the end
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
