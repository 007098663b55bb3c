import sys

import numpy as np
import pytest

from rydberg_rnn.wavefunction import RnnParams, init_params


def random_params(nh: int, seed: int, scale: float = 0.5) -> RnnParams:
    """Glorot kernels plus Gaussian noise on every tensor, biases included."""
    rng = np.random.default_rng(1000 + seed)
    return init_params(nh, seed).map(lambda t: t + rng.normal(scale=scale, size=t.shape))


def central_difference(fn, x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    grad = np.empty_like(x0)
    for j in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += step
        xm[j] -= step
        grad[j] = (fn(xp) - fn(xm)) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rparams():
    return random_params


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(module.RESULTS):
        passed, detail = module.RESULTS[k]
        terminalreporter.write_line(f"ACCEPTANCE {k} {'PASS' if passed else 'FAIL'}: {detail}")
