import numpy as np
import pytest

from hiermix import HierarchyStructure, PoissonMixtureForecast

# Filled by test_acceptance.py; echoed after the run so the verdict lines
# survive pytest's output capture.
acceptance_verdicts: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_verdicts:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)


@pytest.fixture
def three_level() -> HierarchyStructure:
    """Total over two halves over four bottom series."""
    return HierarchyStructure(
        bottom_names=("b1", "b2", "b3", "b4"),
        agg_names=("total", "half1", "half2"),
        agg_matrix=np.array([[1, 1, 1, 1], [1, 1, 0, 0], [0, 0, 1, 1]]),
        levels={"total": (0,), "halves": (1, 2), "bottom": (3, 4, 5, 6)},
    )


def random_forecast(rng, n_bottom, k, horizon, rate_cap=6.0) -> PoissonMixtureForecast:
    weights = rng.dirichlet(np.ones(k))
    rates = rng.uniform(0.1, rate_cap, size=(n_bottom, k, horizon))
    return PoissonMixtureForecast(weights, rates)
