import numpy as np
import pytest

from oogen.synthetic import synthetic_benchmark


@pytest.fixture(scope="session")
def small_bench():
    """Small planted benchmark: 120 entities, 4 relations, 24 unseen."""
    return synthetic_benchmark(seed=1, n_entities=120, n_relations=4, n_unseen=24, ratios=(12, 4, 8), n_clusters=24)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
