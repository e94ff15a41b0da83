import numpy as np
import pytest

from statechain.scan import BoundaryState
from statechain.ssm import SelectiveInputs


def random_inputs(rng, T, D, N, batch=(), dtype=np.float64):
    """Valid scan operands with 0 < a_bar < 1, built directly (no heads)."""
    a_bar = rng.uniform(0.2, 0.99, (*batch, T, D, N)).astype(dtype)
    b_bar = rng.normal(size=(*batch, T, D, N)).astype(dtype)
    u = rng.normal(size=(*batch, T, D)).astype(dtype)
    return SelectiveInputs(
        a_bar=a_bar,
        b_bar_u=b_bar * u[..., None],
        c=rng.normal(size=(*batch, T, N)).astype(dtype),
        d_skip=rng.normal(size=D).astype(dtype),
        u=u,
        delta=rng.uniform(0.01, 0.1, (*batch, T, D)).astype(dtype),
        b_bar=b_bar,
    )


def scalar_inputs(a_bar, b_bar, c, d, u):
    """Single-channel, single-state inputs from per-step lists."""
    T = len(u)
    a = np.asarray(a_bar, float).reshape(T, 1, 1) * np.ones((T, 1, 1))
    b = np.asarray(b_bar, float).reshape(T, 1, 1) * np.ones((T, 1, 1))
    uu = np.asarray(u, float).reshape(T, 1)
    return SelectiveInputs(a_bar=a, b_bar_u=b * uu[..., None], c=np.asarray(c, float).reshape(T, 1) * np.ones((T, 1)),
                           d_skip=np.array([d], float), u=uu, delta=np.full((T, 1), 0.1), b_bar=b)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def zero_state():
    return lambda D, N, batch=(): BoundaryState(np.zeros((*batch, D, N)))


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(number, title, ok, detail):
        lines.append((number, f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
