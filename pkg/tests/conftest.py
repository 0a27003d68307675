import numpy as np
import pytest

from usvessel import autodiff as ad


def probe(out, weights):
    """Scalar ``sum(out * weights)`` so every output entry carries a distinct gradient."""
    weights = np.asarray(weights, dtype=out.dtype)
    val = np.asarray(np.sum(out.value * weights, dtype=np.float64))
    return ad.make_op(val, (out,), lambda g: (g * weights,), "probe")


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximum over entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(loss_fn, arrays, which, h=1e-5, entries=None):
    """Central differences of ``loss_fn(*arrays)`` w.r.t. ``arrays[which]``.

    ``entries`` restricts the check to a list of flat indices.
    """
    base = arrays[which]
    flat = base.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn(*arrays)
        flat[i] = old - h
        down = loss_fn(*arrays)
        flat[i] = old
        out[k] = (up - down) / (2 * h)
    return out


def grad_check(op, arrays, seed=0, h=1e-5, grad_of=None):
    """Max relative error between backward and central differences.

    ``op`` maps Tensors to a Tensor; the scalar is a random weighted sum of
    its output. ``grad_of`` lists which inputs to check (default all).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    weights = None

    def run(*vals, keep=False):
        nonlocal weights
        ts = [ad.Tensor(v.copy(), requires_grad=keep) for v in vals]
        out = op(*ts)
        if weights is None:
            weights = np.random.default_rng(seed).normal(size=out.shape)
        loss = probe(out, weights)
        return (loss, ts) if keep else float(loss.value)

    loss, ts = run(*arrays, keep=True)
    ad.backward(loss)
    worst = 0.0
    for i in grad_of if grad_of is not None else range(len(arrays)):
        num = numeric_grad(lambda *v: run(*v), arrays, i, h)
        worst = max(worst, relative_error(ts[i].grad.ravel(), num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
