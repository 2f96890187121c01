import sys

import numpy as np
import pytest

from fedsophia.models import Batch, MlpSpec


def central_difference_gradient(f, theta, step=1e-5):
    """Independent gradient oracle: one central difference per coordinate."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        out[j] = (f(theta + e) - f(theta - e)) / (2 * step)
    return out


def norm_relative_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300))


def random_problem(rng, sizes=(4, 5, 3), batch=6):
    spec = MlpSpec(sizes)
    theta = rng.standard_normal(spec.dim)
    x = rng.standard_normal((batch, sizes[0]))
    y = rng.integers(0, sizes[-1], size=batch)
    return spec, theta, Batch(x, y)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
