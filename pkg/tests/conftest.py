import warnings

import numpy as np
import pytest

from ordgee.simulation import Scenario, demo_panel, generate_panel, inject_missingness

TRUE_BETA = np.array([-0.4, 1.2, -0.35, 0.35])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def scenario():
    return Scenario.preset("paper-table2")


@pytest.fixture(scope="session")
def complete_panel(scenario):
    return generate_panel(scenario, np.random.default_rng(7))


@pytest.fixture(scope="session")
def incomplete_panel(scenario, complete_panel):
    return inject_missingness(complete_panel, scenario, np.random.default_rng(8))


@pytest.fixture(scope="session")
def demo():
    return demo_panel()


@pytest.fixture(autouse=True)
def _quiet_truncation():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*probabilities truncated.*")
        yield
