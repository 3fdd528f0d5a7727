import numpy as np
import pytest

from sparseiv.data import Dataset

ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (len(s.split(":")[0]), s)):
            terminalreporter.write_line(line)


def sparse_iv_data(n=200, p=50, s=3, seed=0, strength=1.0, k_w=0):
    """Small heteroskedastic IV sample with ``s`` relevant instruments."""
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(n, p))
    w = rng.normal(size=(n, k_w)) if k_w else None
    v = rng.normal(size=n) * (1 + 0.5 * np.abs(f[:, 0]))
    d = strength * f[:, :s].sum(axis=1) + v
    e = 0.6 * v + 0.8 * rng.normal(size=n)
    y = d + e
    if k_w:
        y = y + w.sum(axis=1)
        d = d + 0.5 * w[:, 0]
    return Dataset(y, d, f, w)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
