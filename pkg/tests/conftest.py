import numpy as np
import pytest

from blockpd.models import composite_single_dual, composite_sum, quadratic_saddle, tv1d_denoising


@pytest.fixture(scope="session")
def quad():
    return quadratic_saddle(seed=0)


@pytest.fixture(scope="session")
def tv():
    return tv1d_denoising(seed=0)


@pytest.fixture(scope="session")
def comp1():
    return composite_single_dual(seed=0)


@pytest.fixture(scope="session")
def comp_sum():
    return composite_sum(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
