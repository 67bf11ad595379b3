import numpy as np
import pytest

from bandit_control.lds import LdsParams, double_integrator


@pytest.fixture
def di():
    return double_integrator()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_stable(rng, d_x=3, d_u=2, d_y=2, rho=0.8):
    A = rng.standard_normal((d_x, d_x))
    A *= rho / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    return LdsParams(A, rng.standard_normal((d_x, d_u)), rng.standard_normal((d_y, d_x)))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
