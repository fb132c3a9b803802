import numpy as np
import pytest

from ufedgan.tensor import Tape, Tensor


def central_difference(f, arrays, step=1e-3):
    """Numerical gradient of scalar ``f(*arrays)`` w.r.t. every array (float64)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + step
            hi = f(*arrays)
            a[idx] = orig - step
            lo = f(*arrays)
            a[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def autodiff(build, arrays):
    """Analytic gradients of scalar ``build(*tensors)`` via the tape."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        tape.watch(tensors)
        loss = build(*tensors)
    grads = tape.backward(loss)
    return [grads[t] for t in tensors]


def check_gradient(build, arrays, step=1e-3):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    analytic = autodiff(build, arrays)
    numeric = central_difference(lambda *xs: float(build(*[Tensor(x) for x in xs]).data), arrays, step)
    return relative_error(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
