import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sedkit import backend

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BACKENDS = ["python"]
try:
    backend.get("cython")
    BACKENDS.append("cython")
except ImportError:
    pass


@pytest.fixture(params=BACKENDS)
def kernels(request):
    return backend.get(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_boxes(rng, n, size=100.0, min_side=1.0):
    xy = rng.uniform(0, size, size=(n, 2))
    wh = rng.uniform(min_side, size / 2, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


ACCEPTANCE_LINES = {}


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    """Print and remember one pass/fail line for an acceptance criterion."""
    line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
