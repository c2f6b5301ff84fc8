import numpy as np
import pytest
from hypothesis import settings

from taslora import gradcore as gc
from taslora.spacekit import desk_t

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def space():
    return desk_t()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(loss_fn, param: gc.Tensor, coords, eps=1e-6):
    """Central differences of loss_fn() w.r.t. selected flat coordinates of param."""
    flat = param.data.reshape(-1)
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + eps
        hi = float(loss_fn().data)
        flat[i] = old - eps
        lo = float(loss_fn().data)
        flat[i] = old
        out.append((hi - lo) / (2 * eps))
    return np.asarray(out)


def analytic_grads(loss_fn):
    with gc.Tape() as tape:
        loss = loss_fn()
        return tape.backward(loss)


def assert_grads_match(loss_fn, params, rng, samples=20, rtol=1e-4, atol=1e-7):
    grads = analytic_grads(loss_fn)
    for p in params:
        n = p.data.size
        coords = rng.choice(n, size=min(samples, n), replace=False)
        num = numeric_grad(loss_fn, p, coords)
        ana = grads[p.name].reshape(-1)[coords]
        np.testing.assert_allclose(ana, num, rtol=rtol, atol=atol, err_msg=p.name)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
