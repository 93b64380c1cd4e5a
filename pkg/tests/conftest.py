from __future__ import annotations

import numpy as np
import pytest

from magnuspoly.coeffs import build_coefficients
from magnuspoly.models import PAULI_X, PAULI_Z

Z = PAULI_Z
X = PAULI_X


def random_hermitian(dim: int, rng: np.random.Generator) -> np.ndarray:
    M = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return 0.5 * (M + M.conj().T)


def random_two_qubit_model(seed: int = 7) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return random_hermitian(4, rng), random_hermitian(4, rng)


def commutator(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return x @ y - y @ x


@pytest.fixture(scope="session")
def toy_k3():
    """Z/X toy compiled at k_M = 3, Gamma = 9, degree-2 controls."""
    return build_coefficients(Z, X, 3, 9, 2)


@pytest.fixture(scope="session")
def toy_k6():
    return build_coefficients(Z, X, 6, 12, 3)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record the one-line verdict of an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
