import numpy as np
import pytest

from causal_transfer.env import example1_env, two_track_env
from causal_transfer.expert import ExpertModel
from causal_transfer.policy import BasisPolicySet, TabularSoftmaxPolicy


@pytest.fixture
def bandit():
    return example1_env()


@pytest.fixture
def action_basis():
    return BasisPolicySet([TabularSoftmaxPolicy.deterministic([a], 2) for a in range(2)])


@pytest.fixture
def bandit_expert(bandit):
    return ExpertModel.train(bandit, softening=0.2)


@pytest.fixture(scope="session")
def track():
    return two_track_env()


@pytest.fixture(scope="session")
def track_expert(track):
    return ExpertModel.train(track, softening=0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE = {}


@pytest.fixture
def record():
    def _record(number, title, passed, detail):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(
            f"criterion {n} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
