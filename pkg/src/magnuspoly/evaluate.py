"""Fast evaluation of the compiled expansion, effective Hamiltonians and propagation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from math import factorial

import numpy as np
from numpy.polynomial.legendre import leggauss

from .coeffs import CoeffTensor
from .errors import ValidationError
from .lie import LieBasis, as_hermitian


def control_value(d, t):
    """Value of ``d(t) = sum_g d_g t^g / g!`` (``t`` may be an array)."""
    d = np.asarray(d, dtype=float)
    t = np.asarray(t, dtype=float)
    if len(d) == 0:
        return np.zeros_like(t)
    # Horner form d_0 + t (d_1 + t/2 (d_2 + t/3 (...)))
    out = np.full_like(t, d[-1])
    for g in range(len(d) - 2, -1, -1):
        out = out * t / (g + 1) + d[g]
    return out


def control_derivative(d, t, order: int = 1):
    """``order``-th time derivative of the control polynomial."""
    d = np.asarray(d, dtype=float)
    return control_value(d[order:], t) if order < len(d) else np.zeros_like(np.asarray(t, float))


class _Table:
    """Monomial table of one order: ``value = t^power * prod_i dext[gidx[:, i]]``."""

    __slots__ = ("power", "gidx", "mat")

    def __init__(self, power, gidx, mat):
        self.power = power
        self.gidx = gidx
        self.mat = mat

    def values(self, tp: np.ndarray, dext: np.ndarray) -> np.ndarray:
        # tp: (..., Gamma+1) powers of t; dext: (..., m+2) with trailing 1
        v = tp[..., self.power]
        if self.gidx.shape[1]:
            v = v * np.prod(dext[..., self.gidx], axis=-1)
        return v


def _build_table(rows: list[tuple[int, tuple[int, ...]]], mat: np.ndarray, pad: int) -> _Table:
    width = max((len(g) for _, g in rows), default=0)
    gidx = np.full((len(rows), width), pad, dtype=np.int64)
    power = np.empty(len(rows), dtype=np.int64)
    for r, (pw, g) in enumerate(rows):
        gidx[r, :len(g)] = g
        power[r] = pw
    return _Table(power, gidx, mat)


@dataclass
class CompiledTensor:
    k_M: int
    Gamma: int
    m: int
    dim_g: int
    tables: list[_Table]


def compile_tensor(ct: CoeffTensor) -> CompiledTensor:
    """Group entries by order and monomial ``(k, gamma)`` into dense evaluation tables."""
    if ct._compiled is not None:
        return ct._compiled
    tables = []
    for k in range(1, ct.k_M + 1):
        monos: dict[tuple[int, ...], int] = {}
        items = []
        for (kk, p, mu, g), v in sorted(ct.entries.items()):
            if kk != k:
                continue
            if g not in monos:
                monos[g] = len(monos)
            items.append((monos[g], mu, v))
        mat = np.zeros((len(monos), ct.dim_g))
        for r, mu, v in items:
            mat[r, mu] = v
        rows = [(k + sum(g), g) for g in monos]
        tables.append(_build_table(rows, mat, ct.m + 1))
    ct._compiled = CompiledTensor(ct.k_M, ct.Gamma, ct.m, ct.dim_g, tables)
    return ct._compiled


def _prepare(ct: CoeffTensor, t, d) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise ValidationError("evaluation time must be positive and finite")
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if d.shape[-1] > ct.m + 1:
        if np.any(d[..., ct.m + 1:] != 0):
            raise ValidationError(f"control degree {d.shape[-1] - 1} exceeds tensor degree m={ct.m}")
        d = d[..., :ct.m + 1]
    if not np.all(np.isfinite(d)):
        raise ValidationError("control coefficients must be finite")
    dext = np.zeros(d.shape[:-1] + (ct.m + 2,))
    dext[..., :d.shape[-1]] = d
    dext[..., -1] = 1.0
    tp = t[..., None] ** np.arange(ct.Gamma + 1)
    return tp, dext


def eval_coeffs(ct: CoeffTensor, t: float, d) -> np.ndarray:
    """Per-order coefficient slices ``a^[k]``, shape ``(k_M, dim_g)``.

    Parameters
    ----------
    ct : CoeffTensor
    t : float
        Segment duration (local time starts at 0).
    d : array_like
        Control coefficients ``(d_0, ..., d_m')`` with ``m' <= ct.m`` for
        ``d(t) = sum_g d_g t^g / g!``.
    """
    comp = compile_tensor(ct)
    tp, dext = _prepare(ct, float(t), d)
    out = np.zeros((ct.k_M, ct.dim_g))
    for i, tab in enumerate(comp.tables):
        if tab.mat.shape[0]:
            out[i] = tab.values(tp, dext) @ tab.mat
    return out


def eval_coeffs_batch(ct: CoeffTensor, ts, ds) -> np.ndarray:
    """Vectorised :func:`eval_coeffs` over segments: ``ts`` (S,), ``ds`` (S, m'+1) -> (S, k_M, dim_g)."""
    comp = compile_tensor(ct)
    ts = np.asarray(ts, dtype=float).reshape(-1)
    ds = np.asarray(ds, dtype=float).reshape(len(ts), -1)
    tp, dext = _prepare(ct, ts, ds)
    out = np.zeros((len(ts), ct.k_M, ct.dim_g))
    for i, tab in enumerate(comp.tables):
        if tab.mat.shape[0]:
            out[:, i] = tab.values(tp, dext) @ tab.mat
    return out


@dataclass
class EffectiveHamiltonian:
    """``M = sum_mu a_mu L_mu`` with the per-order slices kept."""

    a_orders: np.ndarray
    t: float
    basis: LieBasis
    _op: np.ndarray | None = field(default=None, repr=False)
    _eig: tuple | None = field(default=None, repr=False)

    @property
    def a(self) -> np.ndarray:
        return self.a_orders.sum(axis=0)

    @property
    def operator(self) -> np.ndarray:
        if self._op is None:
            op = self.basis.combine(self.a)
            if not np.all(np.isfinite(op)):
                raise ValidationError("effective Hamiltonian has non-finite entries")
            self._op = 0.5 * (op + op.conj().T)
        return self._op

    def eigh(self):
        if self._eig is None:
            self._eig = np.linalg.eigh(self.operator)
        return self._eig

    def unitary(self) -> np.ndarray:
        """``exp(-i M)`` via the Hermitian eigendecomposition."""
        w, V = self.eigh()
        return (V * np.exp(-1j * w)) @ V.conj().T


def assemble(basis: LieBasis, a_orders, t: float = 0.0) -> EffectiveHamiltonian:
    a_orders = np.atleast_2d(np.asarray(a_orders, dtype=float))
    if a_orders.shape[1] != basis.dim:
        raise ValidationError(f"coefficient length {a_orders.shape[1]} does not match basis size {basis.dim}")
    return EffectiveHamiltonian(a_orders, float(t), basis)


def expm_hermitian(M: np.ndarray) -> np.ndarray:
    """``exp(-i M)`` for a dense Hermitian matrix."""
    M = np.asarray(M, dtype=complex)
    if not np.all(np.isfinite(M)):
        raise ValidationError("non-finite matrix")
    w, V = np.linalg.eigh(0.5 * (M + M.conj().T))
    return (V * np.exp(-1j * w)) @ V.conj().T


def propagate(M, psi) -> np.ndarray:
    """Apply ``exp(-i M)`` to ``psi``.  ``M`` is an EffectiveHamiltonian or a dense Hermitian matrix."""
    psi = np.asarray(psi, dtype=complex)
    if abs(np.linalg.norm(psi) - 1.0) > 1e-10:
        raise ValidationError("state must be normalised")
    if isinstance(M, EffectiveHamiltonian):
        w, V = M.eigh()
    else:
        M = np.asarray(M, dtype=complex)
        if not np.all(np.isfinite(M)):
            raise ValidationError("non-finite matrix")
        w, V = np.linalg.eigh(0.5 * (M + M.conj().T))
    return V @ (np.exp(-1j * w) * (V.conj().T @ psi))


def truncation_error(a_top, l1_norms) -> float:
    """``sqrt(sum_mu (a_mu |L_mu|_1)^2)`` of the highest-order slice."""
    a_top = np.asarray(a_top, dtype=float)
    l1_norms = np.asarray(l1_norms, dtype=float)
    if a_top.shape != l1_norms.shape:
        raise ValidationError("slice and norm vectors differ in length")
    return float(np.sqrt(np.sum((a_top * l1_norms) ** 2)))


def check_convergence(A, B, t: float, d, rtol: float = 1e-8, max_panels: int = 4096) -> tuple[float, bool]:
    """Bound ``int_0^t |H(s)|_2 ds`` and whether it is below ``pi``.

    Composite 64-point Gauss-Legendre, doubling the panel count until the
    relative change is at most ``rtol``.
    """
    A = as_hermitian(A, "A")
    B = as_hermitian(B, "B")
    d = np.atleast_1d(np.asarray(d, dtype=float))
    x, w = leggauss(64)

    def integral(panels: int) -> float:
        edges = np.linspace(0.0, t, panels + 1)
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            s = 0.5 * (b - a) * x + 0.5 * (a + b)
            vals = control_value(d, s)
            norms = np.array([np.linalg.norm(A + v * B, 2) for v in vals])
            total += 0.5 * (b - a) * float(w @ norms)
        return total

    panels = 1
    prev = integral(panels)
    while panels < max_panels:
        panels *= 2
        cur = integral(panels)
        if abs(cur - prev) <= rtol * max(abs(cur), 1e-300):
            prev = cur
            break
        prev = cur
    else:
        warnings.warn("convergence bound quadrature did not reach the requested tolerance", RuntimeWarning)
    return prev, bool(prev < np.pi)


def effective_hamiltonian(ct: CoeffTensor, basis: LieBasis, t: float, d) -> EffectiveHamiltonian:
    return assemble(basis, eval_coeffs(ct, t, d), t)


def poly_coeffs_from_taylor(d) -> np.ndarray:
    """Convert ``d_g`` (``t^g/g!`` convention) to plain monomial coefficients."""
    d = np.asarray(d, dtype=float)
    return np.array([d[g] / factorial(g) for g in range(len(d))])
