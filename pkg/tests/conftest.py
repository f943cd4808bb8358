import numpy as np
import pytest

from tdt.tensor import Tape, Tensor, no_grad


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f(x) over every entry of x (oracle)."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def tape_grad(build, *arrays):
    """Run ``build`` on leaf tensors under a fresh tape and return (value, grads)."""
    leaves = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*leaves)
        tape.backward(out)
    return out.data, [t.grad for t in leaves]


def value_of(build, *arrays) -> float:
    with no_grad():
        return float(np.sum(build(*[Tensor(np.array(a, dtype=float)) for a in arrays]).data))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
