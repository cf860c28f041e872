import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _no_numba_noise():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*TBB.*")
        yield


def second_difference_oracle(p: int) -> np.ndarray:
    """Dense D'D from numpy's differencing of the identity."""
    D = np.diff(np.eye(p), n=2, axis=0)
    return D.T @ D


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
