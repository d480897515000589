import numpy as np
import pytest

from powerbert import tensor as T

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-8  # finite-difference noise level for components that are exactly zero


def numeric_grad(f, arrays, h=FD_STEP):
    """Central differences of scalar f() with respect to each array (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_error(analytic, numeric):
    """Largest relative error over components of meaningful size.  Components
    whose magnitude is at the finite-difference noise level are held to the
    absolute floor instead; a violation there counts as infinite error."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        tiny = scale <= ABS_FLOOR / REL_TOL
        if np.any(tiny & (err > ABS_FLOOR)):
            return float("inf")
        if np.any(~tiny):
            worst = max(worst, float((err[~tiny] / scale[~tiny]).max()))
    return worst


def gradcheck(build, tensors):
    """build(tensors) -> scalar Tensor.  Returns max relative error over all components."""
    for t in tensors:
        t.zero_grad()
    loss = build(tensors)
    T.backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    def f():
        with T.no_grad():
            return float(build(tensors).data)

    numeric = numeric_grad(f, [t.data for t in tensors])
    return max_rel_error(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


# Acceptance verdict lines, echoed in the terminal summary so they survive
# output capturing.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
