"""Dynamical Lie algebra of a single-control Hamiltonian ``H(t) = A + d(t) B``.

All brackets use the Hermitian-preserving form ``(X, Y) -> -i[X, Y]`` so that
basis elements stay Hermitian and structure constants are real.  The usual
complex constants of ``[L_i, L_j] = sum_k f_ijk L_k`` are ``f_ijk = i c_ijk``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ClosureError, ConventionError, ValidationError

HERMITIAN_TOL = 1e-12
CLOSURE_TOL = 1e-8
DROP_TOL = 1e-12
DEFAULT_EPS_L = 1e-5


def hermitian_bracket(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -1j * (x @ y - y @ x)


def l1_norm(op: np.ndarray) -> float:
    """Induced l1 operator norm (maximum absolute column sum)."""
    return float(np.abs(op).sum(axis=0).max())


def as_hermitian(op, name: str = "operator") -> np.ndarray:
    """Validate and return ``op`` as a complex square Hermitian matrix."""
    arr = np.asarray(op, dtype=complex)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise ValidationError(f"{name} must be a non-empty square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    if np.abs(arr - arr.conj().T).max() > HERMITIAN_TOL:
        raise ValidationError(f"{name} is not Hermitian")
    return arr


@dataclass(frozen=True)
class LieBasis:
    """Ordered HS-orthonormal Hermitian basis of the dynamical Lie algebra.

    ``depth`` counts generators as depth 1 and adds one per bracket, so an
    element of depth ``d`` is a nested bracket of ``d`` generators.
    ``closed`` is True when a generation sweep produced nothing new, i.e. the
    full algebra was reached before ``max_depth``.
    """

    elements: np.ndarray
    depth: np.ndarray
    l1_norms: np.ndarray
    a_coeffs: np.ndarray
    b_coeffs: np.ndarray
    max_depth: int
    closed: bool

    @property
    def dim(self) -> int:
        return int(self.elements.shape[0])

    @property
    def dim_h(self) -> int:
        return int(self.elements.shape[1])

    def combine(self, coeffs) -> np.ndarray:
        """Dense operator ``sum_mu coeffs[mu] L_mu``."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.dim,):
            raise ValidationError(f"expected {self.dim} coefficients, got shape {coeffs.shape}")
        return np.tensordot(coeffs, self.elements, axes=1)


def _orthogonalize(candidate: np.ndarray, elements: list[np.ndarray]) -> np.ndarray:
    # classical Gram-Schmidt applied twice for numerical orthogonality
    v = candidate
    for _ in range(2):
        for el in elements:
            v = v - np.vdot(el, v).real * el
    return v


def generate_lie_algebra(A, B, max_depth: int, eps_L: float = DEFAULT_EPS_L) -> LieBasis:
    """Gram-Schmidt generation of the dynamical Lie algebra of ``{A, B}``.

    Sweeps are breadth-first over depth.  Within a sweep, candidates
    ``-i[g, L]`` are formed for ``g`` in ``(A, B)`` and ``L`` in basis order
    among the elements added by the previous sweep.  A candidate whose
    orthogonal residual has l1 norm below ``eps_L * min(|A|_1, |B|_1)`` is
    discarded.

    Parameters
    ----------
    A, B : array_like
        Hermitian generators of equal dimension.
    max_depth : int
        Largest commutation depth to generate (generators have depth 1).
        Use the Magnus truncation order ``k_M``.
    eps_L : float
        Relative cutoff for discarding near-dependent candidates.

    Returns
    -------
    LieBasis
    """
    A = as_hermitian(A, "A")
    B = as_hermitian(B, "B")
    if A.shape != B.shape:
        raise ValidationError(f"A and B dimension mismatch: {A.shape} vs {B.shape}")
    if int(max_depth) < 1:
        raise ValidationError("max_depth must be >= 1")
    if eps_L <= 0:
        raise ValidationError("eps_L must be positive")

    gen_norms = [l1_norm(g) for g in (A, B) if l1_norm(g) > 0]
    if not gen_norms:
        raise ValidationError("A and B are both zero")
    cutoff = eps_L * min(gen_norms)

    elements: list[np.ndarray] = []
    depth: list[int] = []

    def try_add(candidate: np.ndarray, d: int) -> bool:
        v = _orthogonalize(candidate, elements)
        v = 0.5 * (v + v.conj().T)
        if l1_norm(v) < cutoff:
            return False
        elements.append(v / np.linalg.norm(v))
        depth.append(d)
        return True

    for g in (A, B):
        if l1_norm(g) > 0:
            try_add(g, 1)

    closed = False
    frontier = range(0, len(elements))
    for d in range(2, int(max_depth) + 1):
        start = len(elements)
        for g in (A, B):
            for b in frontier:
                try_add(hermitian_bracket(g, elements[b]), d)
        if len(elements) == start:
            closed = True
            break
        frontier = range(start, len(elements))
    else:
        # a sweep past max_depth that adds nothing also proves closure
        closed = _sweep_is_empty(A, B, elements, frontier, cutoff)

    stack = np.array(elements)
    a_coeffs, _ = _project(A, stack)
    b_coeffs, _ = _project(B, stack)
    return LieBasis(
        elements=stack,
        depth=np.array(depth, dtype=int),
        l1_norms=np.array([l1_norm(e) for e in elements]),
        a_coeffs=a_coeffs,
        b_coeffs=b_coeffs,
        max_depth=int(max_depth),
        closed=closed,
    )


def _sweep_is_empty(A, B, elements, frontier, cutoff) -> bool:
    for g in (A, B):
        for b in frontier:
            v = _orthogonalize(hermitian_bracket(g, elements[b]), elements)
            if l1_norm(v) >= cutoff:
                return False
    return True


def _project(op: np.ndarray, stack: np.ndarray) -> tuple[np.ndarray, float]:
    overlaps = np.einsum("mij,ij->m", stack.conj(), op)
    coeffs = overlaps.real
    residual = op - np.tensordot(coeffs, stack, axes=1)
    return coeffs, float(np.linalg.norm(residual))


def project_onto_basis(op, basis: LieBasis) -> tuple[np.ndarray, float]:
    """HS coefficients of ``op`` in ``basis`` and the Frobenius norm of the remainder."""
    op = np.asarray(op, dtype=complex)
    if op.shape != (basis.dim_h, basis.dim_h):
        raise ValidationError(f"operator shape {op.shape} does not match basis dimension {basis.dim_h}")
    return _project(op, basis.elements)


@dataclass(frozen=True)
class StructureConstants:
    """Real constants with ``-i[L_i, L_j] = sum_k c_ijk L_k``.

    ``tensor`` is the dense ``(D, D, D)`` array; ``entries`` lists the
    nonzero values keyed by ``(i, j, k)``.  ``max_truncation_residual`` is the
    largest projection residual among pairs whose bracket lies beyond the
    generated depth of a non-closed basis (never used by chains of the
    requested order).
    """

    tensor: np.ndarray
    max_residual: float
    max_truncation_residual: float = 0.0

    @property
    def dim_g(self) -> int:
        return int(self.tensor.shape[0])

    @property
    def entries(self) -> dict[tuple[int, int, int], float]:
        idx = np.argwhere(self.tensor != 0.0)
        return {(int(i), int(j), int(k)): float(self.tensor[i, j, k]) for i, j, k in idx}

    def bracket(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Basis coefficients of ``-i[X, Y]`` for ``X, Y`` given by coefficients."""
        return np.einsum("i,j,ijk->k", x, y, self.tensor)

    def ad_matrix(self, x: np.ndarray) -> np.ndarray:
        """Matrix of ``y -> -i[X, y]`` in the basis."""
        return np.einsum("i,ijk->kj", x, self.tensor)


def compute_structure_constants(basis: LieBasis) -> StructureConstants:
    """Project every bracket ``-i[L_i, L_j]`` back onto the basis.

    Raises ClosureError when a pair whose bracket must lie in the generated
    span (``depth_i + depth_j <= max_depth``, or any pair if the basis is
    closed) leaves it by more than ``1e-8`` in Frobenius norm.
    """
    L = basis.elements
    D = basis.dim
    c = np.zeros((D, D, D))
    worst = 0.0
    worst_trunc = 0.0
    for i in range(D):
        for j in range(i + 1, D):
            comm = hermitian_bracket(L[i], L[j])
            overlaps = np.einsum("kab,ab->k", L.conj(), comm)
            if np.abs(overlaps.imag).max(initial=0.0) > 1e-10:
                raise ConventionError(f"complex structure constant for pair ({i}, {j})")
            coeffs = overlaps.real
            residual = float(np.linalg.norm(comm - np.tensordot(coeffs, L, axes=1)))
            must_close = basis.closed or basis.depth[i] + basis.depth[j] <= basis.max_depth
            if must_close:
                if residual > CLOSURE_TOL:
                    raise ClosureError(
                        f"bracket of basis elements ({i}, {j}) leaves the basis "
                        f"(residual {residual:.3e}); increase max_depth",
                        pair=(i, j),
                        residual=residual,
                    )
                worst = max(worst, residual)
            else:
                worst_trunc = max(worst_trunc, residual)
            coeffs = np.where(np.abs(coeffs) < DROP_TOL, 0.0, coeffs)
            c[i, j] = coeffs
            c[j, i] = -coeffs
    return StructureConstants(tensor=c, max_residual=worst, max_truncation_residual=worst_trunc)
