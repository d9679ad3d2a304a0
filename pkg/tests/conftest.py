import numpy as np
import pytest


def fd_jacobian(f, x, h=1e-6):
    """Central differences with step h·max(1, |x_j|)."""
    x = np.asarray(x, float)
    f0 = np.asarray(f(x))
    J = np.zeros(f0.shape + (x.size,))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h * max(1.0, abs(x[j]))
        J[..., j] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * e[j])
    return J


def rel_close(A, B):
    A, B = np.asarray(A), np.asarray(B)
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion and assert it."""
    def record(num, ok, detail, elapsed=None, limit=None):
        if limit is not None:
            ok = ok and elapsed < limit
            detail = f"{detail}; {elapsed:.1f} s (limit {limit:g} s)"
        ACCEPTANCE_LINES.append(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
