import numpy as np
import pytest

from mphil import ndtensor as nd

ACCEPTANCE_LINES: list[str] = []


def gradcheck(build, inputs, step=1e-5):
    """Max relative error between tape gradients and central differences.

    ``build(*inputs)`` must return a 1x1 Tensor; every input is a Tensor with
    ``requires_grad`` set.
    """
    for t in inputs:
        t.zero_grad()
    with nd.Tape() as tape:
        loss = build(*inputs)
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = nd.numeric_grad(lambda: build(*inputs).item(), t, step)
        worst = max(worst, nd.rel_error(analytic, numeric))
    return worst


def random_weights(rng, shape):
    """Random fixed projection used to turn a matrix output into a scalar loss."""
    return nd.constant(rng.standard_normal(shape))


def weighted_sum(out, w):
    return nd.reduce("sum", nd.mul(out, w))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
