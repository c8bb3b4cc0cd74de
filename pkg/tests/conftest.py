import numpy as np
import pytest

from layerparti import tensor as T
from layerparti.tensor import Tensor

ACCEPTANCE = {}


def record_acceptance(number, title, passed, detail=""):
    ACCEPTANCE[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}  {detail}")


def numeric_grad(fn, arrays, which=None, step=1e-3, entries=None):
    """Central differences of ``fn`` evaluated in float64.

    ``fn`` maps a list of Tensors to a scalar Tensor. ``entries`` optionally
    restricts the probe to (input, flat index) pairs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    which = range(len(arrays)) if which is None else which
    out = {i: np.zeros_like(arrays[i]) for i in which}
    probes = entries or [(i, j) for i in which for j in range(arrays[i].size)]
    with T.precision(np.float64), T.no_grad():
        for i, j in probes:
            flat = arrays[i].reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            hi = fn([Tensor(a) for a in arrays]).item()
            flat[j] = orig - step
            lo = fn([Tensor(a) for a in arrays]).item()
            flat[j] = orig
            out[i].reshape(-1)[j] = (hi - lo) / (2 * step)
    return out


def analytic_grad(fn, arrays, which=None):
    which = set(range(len(arrays)) if which is None else which)
    ts = [Tensor(np.asarray(a, dtype=np.float32), requires_grad=i in which) for i, a in enumerate(arrays)]
    T.backward(fn(ts))
    return {i: np.zeros(ts[i].shape) if ts[i].grad is None else ts[i].grad.astype(np.float64)
            for i in which}


def rel_error(a, n):
    """Max elementwise |a - n| / max(|a|, |n|), floored at 1e-2 of the largest |n|."""
    a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
    floor = max(1e-2 * np.abs(n).max(), 1e-8)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def gradcheck(fn, arrays, which=None):
    num = numeric_grad(fn, arrays, which)
    ana = analytic_grad(fn, arrays, which)
    return max(rel_error(ana[i], num[i]) for i in num)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
