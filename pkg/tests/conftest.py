import numpy as np
import pytest

from dlrmarket import covariance_for, load_case
from dlrmarket.data import fixture_path
from dlrmarket.market_multi import MULTI_MODES, MultiPeriodConfig, successive_linearization
from dlrmarket.market_single import RATING_MODES, SinglePeriodConfig, solve_single

_ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_report():
    def record(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok

    return record


def _load(name):
    case = load_case(fixture_path(name))
    return case, covariance_for(case)


@pytest.fixture(scope="session")
def congested():
    return _load("case3_congested")


@pytest.fixture(scope="session")
def transient():
    return _load("case3_transient")


@pytest.fixture(scope="session")
def zero_unc():
    return _load("case3_zero_uncertainty")


@pytest.fixture(scope="session")
def minimal():
    return _load("case2_minimal")


@pytest.fixture(scope="session")
def single_results(congested):
    case, jc = congested
    return {m: solve_single(case, jc, SinglePeriodConfig(0.05, m)) for m in RATING_MODES}


@pytest.fixture(scope="session")
def multi_results(transient):
    case, jc = transient
    return {m: successive_linearization(case, jc, MultiPeriodConfig(0.05, m)) for m in MULTI_MODES}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
