import numpy as np
import pytest

from occworld.autograd import Tensor


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``fn`` at float64 ``x``."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = fn(x)
        flat[i] = old - eps
        lo = fn(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, floor=1e-6):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    assert np.all((err < rel) | (np.abs(analytic - numeric) < floor)), \
        f"max rel err {err.max():.3g}\nanalytic {analytic.ravel()[:8]}\nnumeric {numeric.ravel()[:8]}"


def check_op_grad(build, *arrays, rel=1e-4, floor=1e-6, eps=1e-6):
    """``build`` maps Tensors to a Tensor; checks d sum(out * r)/d inputs."""
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    proj = np.random.default_rng(123).normal(size=out.shape)
    (out * proj).sum().backward()
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(x) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
            return float(np.sum(build(*args).data * proj))
        num = numeric_grad(f, a.copy(), eps)
        ana = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        assert_grad_close(ana, num, rel, floor)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs (trend criteria)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
