"""Independent oracles and the error-scaling experiment.

* ``ode_reference``: fixed-step 8th-order Runge-Kutta (Dormand-Prince 8(5,3)
  tableau) with a step-doubling convergence check.
* ``quadrature_oracle``: the first three Magnus terms by nested
  Gauss-Legendre quadrature with dense commutators.
* ``error_scan``: state error of the compiled expansion against the ODE
  reference over a grid of durations, with a power-law fit.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate._ivp import dop853_coefficients as _dop

from .coeffs import CoeffTensor
from .errors import QuadratureError, ReferenceUnconvergedError, ValidationError
from .evaluate import control_value, eval_coeffs, propagate, assemble
from .lie import LieBasis, as_hermitian

_RK_A = _dop.A[:_dop.N_STAGES, :_dop.N_STAGES]
_RK_B = _dop.B
_RK_C = _dop.C[:_dop.N_STAGES]

FIT_WINDOW = (1e-14, 1e-2)


def _rk_solve(A, B, d, t, psi, steps):
    h = t / steps
    y = psi.copy()
    for n in range(steps):
        s0 = n * h
        dv = control_value(d, s0 + _RK_C * h)
        K = []
        for i in range(len(_RK_C)):
            yi = y
            for j in range(i):
                if _RK_A[i, j] != 0.0:
                    yi = yi + (h * _RK_A[i, j]) * K[j]
            K.append(-1j * (A @ yi + dv[i] * (B @ yi)))
        for i, bi in enumerate(_RK_B):
            if bi != 0.0:
                y = y + (h * bi) * K[i]
    return y


def ode_reference(A, B, d, t: float, psi0, steps: int = 100, tol: float = 1e-13,
                  max_doublings: int = 6) -> np.ndarray:
    """Integrate ``i dpsi/dt = (A + d(t) B) psi`` on ``[0, t]``.

    The step count doubles from ``steps`` until two successive solutions
    differ by at most ``tol`` (2-norm); the finer one is returned without
    renormalisation.  ``psi0`` may hold several states as columns.

    Raises
    ------
    ReferenceUnconvergedError
        If ``max_doublings`` refinements do not reach ``tol``.
    """
    if steps < 16:
        raise ValidationError("steps must be >= 16")
    if t < 0:
        raise ValidationError("t must be non-negative")
    A = as_hermitian(A, "A")
    B = as_hermitian(B, "B")
    psi0 = np.asarray(psi0, dtype=complex)
    d = np.atleast_1d(np.asarray(d, dtype=float))
    prev = _rk_solve(A, B, d, t, psi0, steps)
    for _ in range(max_doublings):
        steps *= 2
        cur = _rk_solve(A, B, d, t, psi0, steps)
        if np.linalg.norm(cur - prev) <= tol:
            return cur
        prev = cur
    raise ReferenceUnconvergedError(f"reference did not converge to {tol:g} with {steps} steps")


def _comm(x, y):
    return x @ y - y @ x


def _simplex_nodes(t: float, n: int, depth: int):
    """Nodes and weights for ``t >= s_1 >= s_2 >= ... >= s_depth >= 0``."""
    x, w = leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    upper = np.array(float(t))
    weights = np.array(1.0)
    nodes: list[np.ndarray] = []
    for _ in range(depth):
        s = upper[..., None] * x
        weights = weights[..., None] * (upper[..., None] * w)
        nodes = [nd[..., None] * np.ones(n) for nd in nodes] + [s]
        upper = s
    return nodes, weights


def _magnus_terms(A, B, d, t, n, k_max):
    terms = []
    H = lambda s: A + control_value(d, s)[..., None, None] * B  # noqa: E731
    (s1,), w1 = _simplex_nodes(t, n, 1)
    terms.append(np.einsum("i,iab->ab", w1, H(s1)))
    if k_max >= 2:
        (s1, s2), w2 = _simplex_nodes(t, n, 2)
        integrand = _comm(H(s1), H(s2))
        terms.append(-0.5j * np.einsum("ij,ijab->ab", w2, integrand))
    if k_max >= 3:
        (s1, s2, s3), w3 = _simplex_nodes(t, n, 3)
        H1, H2, H3 = H(s1), H(s2), H(s3)
        integrand = _comm(H1, _comm(H2, H3)) + _comm(H3, _comm(H2, H1))
        terms.append(-np.einsum("ijk,ijkab->ab", w3, integrand) / 6.0)
    return terms


def quadrature_oracle_terms(A, B, d, t: float, k_max: int, tol: float = 1e-10) -> list[np.ndarray]:
    """Magnus terms ``M_1..M_kmax`` (``U = exp(-i M)``) by nested quadrature.

    ``M_1 = int H``, ``M_2 = -(i/2) int int [H_1, H_2]``,
    ``M_3 = -(1/6) int int int ([H_1,[H_2,H_3]] + [H_3,[H_2,H_1]])`` over
    ``t >= t_1 >= t_2 >= t_3 >= 0``.  The node count doubles until the sum
    changes by at most ``tol`` relative.
    """
    if k_max not in (1, 2, 3):
        raise ValidationError("k_max must be 1, 2 or 3")
    A = as_hermitian(A, "A")
    B = as_hermitian(B, "B")
    d = np.atleast_1d(np.asarray(d, dtype=float))
    n = 8
    prev = _magnus_terms(A, B, d, t, n, k_max)
    while n < 64:
        n *= 2
        cur = _magnus_terms(A, B, d, t, n, k_max)
        diff = max(np.linalg.norm(c - p) for c, p in zip(cur, prev))
        scale = max(np.linalg.norm(sum(cur)), 1e-300)
        if diff <= tol * scale:
            return [0.5 * (c + c.conj().T) for c in cur]
        prev = cur
    raise QuadratureError("nested quadrature did not stabilise")


def quadrature_oracle(A, B, d, t: float, k_max: int, tol: float = 1e-10) -> np.ndarray:
    """Truncated Magnus operator ``M^{(k_max)} = M_1 + ... + M_k_max``."""
    return sum(quadrature_oracle_terms(A, B, d, t, k_max, tol))


# --------------------------------------------------------------------------- error scan

@dataclass
class ScanResult:
    """Per-sample errors of a scan and the fitted apparent order."""

    rows: list[tuple[float, int, float]]
    k_M: int
    k_app: float = float("nan")
    fit_window: tuple[float, float] = (float("nan"), float("nan"))
    n_fit: int = 0
    stats: dict[float, tuple[float, float, float]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "sample_id", "eps_me", "eps_floor_flag"])
        for t, sid, eps in self.rows:
            w.writerow([repr(float(t)), sid, repr(float(eps)), int(eps < FIT_WINDOW[0])])
        return buf.getvalue()

    def summary(self) -> str:
        return (f"# k_M={self.k_M} k_app={self.k_app:.4f} fit_t=[{self.fit_window[0]:.6g},"
                f"{self.fit_window[1]:.6g}] n_fit={self.n_fit}")


def fit_power_law(ts, errs, window=FIT_WINDOW) -> tuple[float, tuple[float, float], int]:
    """Least-squares slope of ``log err`` against ``log t`` over points inside ``window``."""
    ts = np.asarray(ts, float)
    errs = np.asarray(errs, float)
    keep = (errs >= window[0]) & (errs <= window[1]) & (errs > 1e-15)
    if keep.sum() < 2:
        raise ValidationError("fewer than two scan points inside the fit window")
    slope, _ = np.polyfit(np.log(ts[keep]), np.log(errs[keep]), 1)
    return float(slope), (float(ts[keep].min()), float(ts[keep].max())), int(keep.sum())


def sample_rng(seed: int, *counters: int) -> np.random.Generator:
    """Independent generator for the task identified by ``counters`` (counter-based split)."""
    return np.random.default_rng([int(seed), *map(int, counters)])


def error_scan(ct: CoeffTensor, basis: LieBasis, A, B, t_grid, n_samples: int = 20, seed: int = 0,
               k_M: int | None = None, degree: int | None = None) -> ScanResult:
    """State error ``|psi_M - psi_ODE|`` for Haar states and uniform controls.

    Parameters
    ----------
    ct, basis : CoeffTensor, LieBasis
        Compiled model.
    A, B : array_like
        Generators (for the reference integration).
    t_grid : sequence of float
        Durations to scan.
    n_samples : int
        Samples per duration; each draws ``psi_0`` Haar-random and
        ``d_g ~ U[-1, 1]`` for ``g = 0..degree``.
    k_M : int, optional
        Truncation order to evaluate (``<= ct.k_M``); default ``ct.k_M``.
    degree : int, optional
        Control degree, default ``ct.m``.
    """
    from .models import haar_state

    A = as_hermitian(A, "A")
    B = as_hermitian(B, "B")
    k_M = ct.k_M if k_M is None else int(k_M)
    if not 1 <= k_M <= ct.k_M:
        raise ValidationError(f"k_M must be in 1..{ct.k_M}")
    degree = ct.m if degree is None else int(degree)
    if degree > ct.m:
        raise ValidationError("control degree exceeds the tensor degree")
    rows = []
    stats = {}
    for it, t in enumerate(t_grid):
        errs = []
        for sid in range(n_samples):
            rng = sample_rng(seed, it, sid)
            psi0 = haar_state(A.shape[0], rng)
            d = rng.uniform(-1.0, 1.0, degree + 1)
            a = eval_coeffs(ct, t, d)[:k_M]
            psi_me = propagate(assemble(basis, a, t), psi0)
            psi_ref = ode_reference(A, B, d, t, psi0)
            eps = float(np.linalg.norm(psi_me - psi_ref))
            rows.append((float(t), sid, eps))
            errs.append(eps)
        stats[float(t)] = (float(np.mean(errs)), float(np.min(errs)), float(np.max(errs)))
    res = ScanResult(rows, k_M, stats=stats)
    ts = np.array(sorted(stats))
    means = np.array([stats[t][0] for t in ts])
    res.k_app, res.fit_window, res.n_fit = fit_power_law(ts, means)
    return res
