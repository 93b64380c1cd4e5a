"""Hamiltonian models, target gates and special states.

``sparse``: ``A = sum_i Z_i Z_{i+1}`` (open chain), ``B = sum_i X_i``.
``dense``: ``A = sum_{i<j} Z_i Z_j / |i - j|``, ``B = sum_i X_i``.
``rydberg``: perfect-blockade three-level atoms ``{|0>, |1>, |r>}`` with
``A = 1/2 sum_i X_i Q_[i]`` and ``B = 1/2 sum_i Z_i``, where ``X`` couples
``|1> <-> |r>`` and leaves ``|0>`` as a +1 eigenstate, ``Z = diag(1, 1, -1)``
and ``Q_[i]`` projects every other atom onto ``{|0>, |1>}``.

Gates act on the full space and as the identity on any product state
containing ``|r>``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

from .errors import LimitError, ValidationError

MAX_DIM = 1024

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)

RYD_X = np.array([[1, 0, 0], [0, 0, 1], [0, 1, 0]], dtype=complex)
RYD_Z = np.diag([1.0, 1.0, -1.0]).astype(complex)
RYD_Q = np.diag([1.0, 1.0, 0.0]).astype(complex)

LOCAL_DIM = {"sparse": 2, "dense": 2, "rydberg": 3}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n: int

    @property
    def local_dim(self) -> int:
        return LOCAL_DIM[self.name]

    @property
    def dim(self) -> int:
        return self.local_dim ** self.n


def _check(name: str, n: int) -> ModelSpec:
    if name not in LOCAL_DIM:
        raise ValidationError(f"unknown model {name!r}; expected one of {sorted(LOCAL_DIM)}")
    if int(n) < 1:
        raise ValidationError("n must be >= 1")
    spec = ModelSpec(name, int(n))
    if spec.dim > MAX_DIM:
        raise LimitError(f"model {name} with n={n} has dimension {spec.dim} > {MAX_DIM}")
    return spec


def site_operator(op: np.ndarray, site: int, n: int) -> np.ndarray:
    """``I x ... x op x ... x I`` with ``op`` on ``site`` (0-based, leftmost factor first)."""
    eye = np.eye(op.shape[0], dtype=complex)
    return reduce(np.kron, [op if j == site else eye for j in range(n)])


def product_operator(ops: dict[int, np.ndarray], n: int, local_dim: int) -> np.ndarray:
    eye = np.eye(local_dim, dtype=complex)
    return reduce(np.kron, [ops.get(j, eye) for j in range(n)])


def build_model(name: str, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense generators ``(A, B)`` of the named model."""
    spec = _check(name, n)
    n = spec.n
    if spec.name == "sparse":
        A = sum((product_operator({i: PAULI_Z, i + 1: PAULI_Z}, n, 2) for i in range(n - 1)),
                np.zeros((spec.dim, spec.dim), complex))
        B = sum(site_operator(PAULI_X, i, n) for i in range(n))
    elif spec.name == "dense":
        A = np.zeros((spec.dim, spec.dim), complex)
        for i in range(n):
            for j in range(i + 1, n):
                A = A + (1.0 / (j - i)) * product_operator({i: PAULI_Z, j: PAULI_Z}, n, 2)
        B = sum(site_operator(PAULI_X, i, n) for i in range(n))
    else:
        A = np.zeros((spec.dim, spec.dim), complex)
        for i in range(n):
            ops = {j: RYD_Q for j in range(n) if j != i}
            ops[i] = RYD_X
            A = A + 0.5 * product_operator(ops, n, 3)
        B = 0.5 * sum(site_operator(RYD_Z, i, n) for i in range(n))
    return np.asarray(A, complex), np.asarray(B, complex)


def _digits(n: int, local_dim: int) -> np.ndarray:
    """Per-site level of every product basis state, shape ``(local_dim**n, n)``."""
    idx = np.arange(local_dim ** n)
    return np.stack([(idx // local_dim ** (n - 1 - j)) % local_dim for j in range(n)], axis=1)


def ckp_gate(n: int, phi: float, local_dim: int = 2) -> np.ndarray:
    """Diagonal ``C_kP(phi)``: ``e^{i phi}`` on computational states except ``|1...1>`` (which gets 1).

    With ``local_dim = 3`` states containing ``|r>`` are left unchanged.
    """
    if n < 2:
        raise ValidationError("ckp_gate needs n >= 2")
    if local_dim not in (2, 3) or local_dim ** n > MAX_DIM:
        raise ValidationError("unsupported local dimension or size")
    dig = _digits(n, local_dim)
    diag = np.full(len(dig), np.exp(1j * phi))
    diag[np.all(dig == 1, axis=1)] = 1.0
    diag[np.any(dig == 2, axis=1)] = 1.0
    return np.diag(diag)


def rz_generator(n: int, local_dim: int = 2) -> np.ndarray:
    """Diagonal ``g`` with ``rz_product(n, theta) = exp(-i theta g)``.

    Per atom ``g_i = (I - 2|1><1|) / 2`` on the qubit levels and 0 on ``|r>``.
    """
    level = np.array([0.5, -0.5, 0.0])[:local_dim]
    return level[_digits(n, local_dim)].sum(axis=1)


def rz_product(n: int, theta: float, local_dim: int = 2) -> np.ndarray:
    """``prod_i R_Z_i(theta)`` with ``R_Z = I cos(theta/2) - i (I - 2|1><1|) sin(theta/2)``; identity on ``|r>``."""
    return np.diag(np.exp(-1j * theta * rz_generator(n, local_dim)))


def computational_state(bits, local_dim: int = 2) -> np.ndarray:
    n = len(bits)
    psi = np.zeros(local_dim ** n, dtype=complex)
    psi[int(sum(b * local_dim ** (n - 1 - j) for j, b in enumerate(bits)))] = 1.0
    return psi


def symmetric_basis_states(n: int, local_dim: int = 3) -> list[np.ndarray]:
    """``|1>^i |0>^(n-i)`` for ``i = 0..n``."""
    return [computational_state([1] * i + [0] * (n - i), local_dim) for i in range(n + 1)]


def qubit_subspace_indices(n: int, local_dim: int = 3) -> np.ndarray:
    """Indices of product states without ``|r>``."""
    return np.flatnonzero(np.all(_digits(n, local_dim) < 2, axis=1))


def haar_state(dim: int, seed=None) -> np.ndarray:
    """Haar-random unit vector from a normalised complex Gaussian.  ``seed`` may be a Generator."""
    if int(dim) < 1:
        raise ValidationError("dim must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return v / np.linalg.norm(v)
