import numpy as np
import pytest
from scipy.special import iv

from nobackstep.core import KernelField, ReactionProfile


def bessel_kernel(c: float, n_points: int) -> KernelField:
    """Closed-form kernel for constant lambda = c > 0: -c y I1(z) / z, z = sqrt(c (x^2 - y^2))."""
    x = np.linspace(0.0, 1.0, n_points)
    i, j = np.tril_indices(n_points)
    X, Y = x[i], x[j]
    z = np.sqrt(c * np.maximum(X**2 - Y**2, 0.0))
    ratio = np.where(z > 0, iv(1, z) / np.where(z > 0, z, 1.0), 0.5)
    return KernelField(KernelField.zeros(n_points).grid, -c * Y * ratio)


def chebyshev(c, gamma, n=101):
    return ReactionProfile.from_function(lambda x: c * np.cos(gamma * np.arccos(x)), n)


@pytest.fixture
def cheb():
    return chebyshev


ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
