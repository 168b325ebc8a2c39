import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from votetrans.model import CovariateDesign, ParameterVector  # noqa: E402
from votetrans.simulation import scenario, simulate, _rng  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def discordant_small():
    """50 stations of the discordant scenario plus its design and truth."""
    cfg = scenario("discordant", k=50, seed=11)
    ds, cells = simulate(cfg, _rng(cfg.seed))
    return cfg, ds, cells


@pytest.fixture(scope="session")
def three_by_three():
    """A 3x3 dataset with two covariates and separate overdispersion per row."""
    cfg = scenario("milan", k=40, seed=5)
    ds, _ = simulate(cfg, _rng(cfg.seed))
    return cfg, ds


@pytest.fixture
def paper_alpha():
    return np.array([[np.log(0.7 / 0.3)], [np.log(0.2 / 0.8)]])


@pytest.fixture
def empty_design():
    return CovariateDesign()


def random_params(rng, r, c, n_beta, n_tau):
    return ParameterVector(rng.normal(0, 1, (r, c - 1)), rng.normal(0, 0.5, n_beta),
                           rng.uniform(-4, -1, n_tau))
