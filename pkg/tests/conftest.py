from __future__ import annotations

import numpy as np
import pytest

from mixgraph import engine as E


def central_diff(f, p, i, rel_step=1e-5):
    """Central finite difference of scalar f at coordinate i of flat vector p."""
    p = np.asarray(p, dtype=np.float64)
    h = rel_step * max(1.0, abs(p.flat[i]))
    hi = p.copy()
    hi.flat[i] += h
    lo = p.copy()
    lo.flat[i] -= h
    return (f(hi) - f(lo)) / (2.0 * h)


def grad_vs_fd(loss_fn, p0, n_probes=20, rel_tol=1e-4, rng=None, rel_step=1e-5):
    """Compare tape gradients of loss_fn against central differences.

    loss_fn(tape, param_buffer) must return a scalar Buffer. Probes n_probes
    random coordinates (all of them when the parameter is small).
    """
    rng = rng or np.random.default_rng(0)
    p0 = np.asarray(p0, dtype=np.float64)

    tape = E.Tape()
    p = tape.leaf(p0)
    loss = loss_fn(tape, p)
    tape.backward(loss)
    grad = p.grad.copy()

    def scalar(pv):
        t = E.Tape()
        b = t.leaf(pv.reshape(p0.shape))
        return float(E.value_of(loss_fn(t, b)))

    size = p0.size
    coords = np.arange(size) if size <= n_probes else rng.choice(size, n_probes, replace=False)
    worst = 0.0
    for i in coords:
        fd = central_diff(scalar, p0.ravel(), int(i), rel_step=rel_step)
        g = grad.flat[int(i)]
        denom = max(abs(fd), abs(g), 1e-8)
        worst = max(worst, abs(fd - g) / denom)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
