"""Derivatives of the compiled expansion and of the propagator ``exp(-i M)``.

Time derivative: every monomial ``t^(k + sum gamma)`` differentiates to
``(k + sum gamma) t^(k + sum gamma - 1)``, so ``Ttilde = (k + sum gamma) T``.

Control derivative: for a sorted tuple ``gamma`` containing ``alpha`` with
multiplicity ``c``, ``d/dd_alpha prod_i d_{gamma_i} = c * prod`` over
``gamma`` with one ``alpha`` removed.  ``D[(alpha, k, p, mu, gamma')]`` collects
``c * T[(k, p, mu, gamma)]`` for every ``gamma = gamma' + (alpha,)``; this is
the symmetrised form of inserting ``alpha`` at each position of an ordered
tuple.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .coeffs import CoeffTensor, Key
from .errors import ValidationError
from .evaluate import EffectiveHamiltonian, _build_table, _prepare, _Table, compile_tensor
from .lie import LieBasis, StructureConstants


@dataclass
class GradTensors:
    """Reindexed tensors for ``da/dt`` and ``da/dd_alpha``."""

    Ttilde: dict[Key, float]
    D: dict[tuple[int, int, int, int, tuple[int, ...]], float]
    k_M: int
    m: int
    dim_g: int
    t_tables: list[_Table]
    d_tables: list[list[_Table]]


def build_grad_tensors(ct: CoeffTensor) -> GradTensors:
    Ttilde: dict[Key, float] = {}
    D: dict[tuple[int, int, int, int, tuple[int, ...]], float] = {}
    for key in ct.sorted_keys():
        k, p, mu, g = key
        v = ct.entries[key]
        Ttilde[key] = (k + sum(g)) * v
        for alpha in sorted(set(g)):
            c = g.count(alpha)
            rest = list(g)
            rest.remove(alpha)
            dkey = (alpha, k, p, mu, tuple(rest))
            D[dkey] = D.get(dkey, 0.0) + c * v

    # time-derivative tables share monomials with T but drop one power of t
    comp = compile_tensor(ct)
    t_tables = []
    for k, tab in enumerate(comp.tables, start=1):
        scale = tab.power.astype(float)
        t_tables.append(_Table(tab.power - 1, tab.gidx, tab.mat * scale[:, None]))

    d_tables = []
    for alpha in range(ct.m + 1):
        per_order = []
        for k in range(1, ct.k_M + 1):
            monos: dict[tuple[int, ...], int] = {}
            items = []
            for (a, kk, p, mu, rest), v in sorted(D.items()):
                if a != alpha or kk != k:
                    continue
                if rest not in monos:
                    monos[rest] = len(monos)
                items.append((monos[rest], mu, v))
            mat = np.zeros((len(monos), ct.dim_g))
            for r, mu, v in items:
                mat[r, mu] = v
            rows = [(k + alpha + sum(rest), rest) for rest in monos]
            per_order.append(_build_table(rows, mat, ct.m + 1))
        d_tables.append(per_order)
    return GradTensors(Ttilde, D, ct.k_M, ct.m, ct.dim_g, t_tables, d_tables)


def _sum_tables(tables, tp, dext, dim_g, k_max):
    out = np.zeros(tp.shape[:-1] + (dim_g,))
    for tab in tables[:k_max]:
        if tab.mat.shape[0]:
            out = out + tab.values(tp, dext) @ tab.mat
    return out


def d_a_dt(gt: GradTensors, ct: CoeffTensor, t: float, d, k_max: int | None = None) -> np.ndarray:
    """``da/dt`` summed over orders ``1..k_max`` (default all)."""
    tp, dext = _prepare(ct, float(t), d)
    return _sum_tables(gt.t_tables, tp, dext, ct.dim_g, k_max or ct.k_M)


def d_a_dd(gt: GradTensors, ct: CoeffTensor, t: float, d, alpha: int, k_max: int | None = None) -> np.ndarray:
    """``da/dd_alpha`` summed over orders ``1..k_max``."""
    if not 0 <= alpha <= ct.m:
        raise ValidationError(f"alpha={alpha} outside 0..{ct.m}")
    tp, dext = _prepare(ct, float(t), d)
    return _sum_tables(gt.d_tables[alpha], tp, dext, ct.dim_g, k_max or ct.k_M)


def segment_jacobian(gt: GradTensors, ct: CoeffTensor, ts, ds) -> np.ndarray:
    """Batched ``da/dc`` for segment coordinates ``c = (t, d_0..d_m)``.

    ``ts`` has shape ``(S,)`` and ``ds`` ``(S, m + 1)``; returns ``(S, m + 2, dim_g)``.
    """
    ts = np.asarray(ts, float).reshape(-1)
    ds = np.asarray(ds, float).reshape(len(ts), -1)
    tp, dext = _prepare(ct, ts, ds)
    out = np.zeros((len(ts), ct.m + 2, ct.dim_g))
    out[:, 0] = _sum_tables(gt.t_tables, tp, dext, ct.dim_g, ct.k_M)
    for alpha in range(ct.m + 1):
        out[:, alpha + 1] = _sum_tables(gt.d_tables[alpha], tp, dext, ct.dim_g, ct.k_M)
    return out


def dexp_series_matrix(sc: StructureConstants, a, k_D: int) -> np.ndarray:
    """Matrix ``sum_{j=0}^{k_D} (-1)^j / (j+1)! ad_a^j`` in the basis.

    ``ad_a`` is the Hermitian bracket ``y -> -i[M, y]``.  Applied to the
    coefficients of ``dM`` it gives the coefficients of the Hermitian ``G``
    with ``dU = -i U G``.
    """
    ad = sc.ad_matrix(np.asarray(a, float))
    D = ad.shape[0]
    term = np.eye(D)
    total = np.eye(D)
    for j in range(1, k_D + 1):
        term = ad @ term
        total = total + ((-1) ** j / factorial(j + 1)) * term
    return total


def propagator_derivative(M, dM, k_D: int, sc: StructureConstants | None = None,
                          basis: LieBasis | None = None) -> np.ndarray:
    """``dU = -i U sum_{j<=k_D} i^j / (j+1)! ad_M^j(dM)`` with ``U = exp(-i M)``.

    ``M`` is an EffectiveHamiltonian or dense Hermitian matrix.  If ``dM`` is a
    coefficient vector, structure constants are given and the basis is closed
    under brackets, the adjoint series is evaluated in the Lie basis;
    otherwise dense commutators are used (a truncated basis would drop the
    components of ``ad_M^j dM`` beyond its generated depth).
    """
    if k_D < 0:
        raise ValidationError("k_D must be >= 0")
    if isinstance(M, EffectiveHamiltonian):
        op = M.operator
        U = M.unitary()
        basis = basis or M.basis
        a = M.a
    else:
        op = np.asarray(M, complex)
        w, V = np.linalg.eigh(op)
        U = (V * np.exp(-1j * w)) @ V.conj().T
        a = None
    dM = np.asarray(dM)
    if dM.ndim == 1 and sc is not None and basis is not None and basis.closed and a is not None:
        G = basis.combine(dexp_series_matrix(sc, a, k_D) @ dM.astype(float))
    else:
        dM = basis.combine(dM) if dM.ndim == 1 else dM.astype(complex)
        if dM.shape != op.shape:
            raise ValidationError("M and dM differ in shape")
        term = dM
        G = dM.copy()
        for j in range(1, k_D + 1):
            term = -1j * (op @ term - term @ op)
            G = G + ((-1) ** j / factorial(j + 1)) * term
    return -1j * U @ G
