import numpy as np
import pytest

from dapc import autodiff as ad


def fd_check(build, arrays, eps=1e-6):
    """Worst relative error between ``backward`` and central differences.

    ``build`` maps Tensors (one per array) to a scalar Tensor.
    """
    tensors = [ad.Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    grads = ad.backward(build(*tensors))

    def f():
        return float(build(*[ad.Tensor(t.values) for t in tensors]).values)

    worst = 0.0
    for t in tensors:
        numeric = ad.finite_difference_grad(f, t.values, eps)
        analytic = grads.get(t, np.zeros_like(t.values))
        worst = max(worst, ad.relative_error(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed again at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
