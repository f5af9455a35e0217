import numpy as np
import pytest

from flowvid import autodiff as ad

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numerical_jacobian(f, x, eps=1e-5):
    """Central-difference Jacobian of ``f: R^d -> R^d`` (flattened), float64."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = eps
        hi = np.asarray(f((flat + e).reshape(x.shape)), dtype=np.float64).reshape(-1)
        lo = np.asarray(f((flat - e).reshape(x.shape)), dtype=np.float64).reshape(-1)
        cols.append((hi - lo) / (2 * eps))
    return np.stack(cols, axis=1)


def numerical_logdet(f, x, eps=1e-5):
    return np.linalg.slogdet(numerical_jacobian(f, x, eps))[1]


def randomize(module, rng, std=0.1):
    """Perturb every parameter so zero-initialised layers become non-trivial."""
    for p in module.parameters():
        p.data = p.data + rng.normal(0.0, std, size=p.shape).astype(p.dtype)


def grad_check(loss_fn, param, rng, n_entries=6, eps=1e-5):
    """Max relative error between tape and central-difference gradients.

    ``loss_fn()`` must build a fresh scalar loss tensor on every call.  Entries
    are drawn among those whose analytic gradient is not negligible.
    """
    param.grad = None
    ad.backward(loss_fn())
    analytic = param.grad.copy()
    flat = np.abs(analytic).reshape(-1)
    candidates = np.flatnonzero(flat > 1e-3 * flat.max())
    assert candidates.size, "gradient is identically zero"
    picks = rng.choice(candidates, size=min(n_entries, candidates.size), replace=False)
    worst = 0.0
    for k in picks:
        idx = np.unravel_index(k, param.shape)
        orig = param.data[idx]
        with ad.no_grad():
            param.data[idx] = orig + eps
            hi = float(loss_fn().data)
            param.data[idx] = orig - eps
            lo = float(loss_fn().data)
        param.data[idx] = orig
        num = (hi - lo) / (2 * eps)
        a = float(analytic[idx])
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-12))
    param.grad = None
    return worst
