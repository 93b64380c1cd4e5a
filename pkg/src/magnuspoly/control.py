"""Continuous-pulse GrAPE with Hermite splines and duration optimisation.

The pulse sequence is ``U(h, theta) = R(theta) D_S ... D_1`` with
``D_s = exp(-i M(c_s))`` and ``R(theta) = exp(-i theta g)`` a diagonal
single-qubit layer.  The cost is

    J = 1/2 sum_r (1 - Re <phi_r| U |psi_r>) + lambda_T * T.

Propagation runs inside the smallest subspace that contains the trajectory
states and is invariant under ``A`` and ``B`` (hence under every basis
element); restricted to it the dynamics are identical, and for the blockade
model the subspace has dimension about ``2(n + 1)``.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

from .coeffs import CoeffTensor
from .errors import ResourceError, ValidationError
from .evaluate import eval_coeffs_batch, truncation_error
from .gradients import GradTensors, build_grad_tensors, dexp_series_matrix, segment_jacobian
from .lie import LieBasis, StructureConstants
from .spline import HermiteSpline, pullback, resample, spline_to_segments

MAX_SEGMENTS = 512


def invariant_subspace(states, generators, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (columns) of the smallest subspace containing ``states`` and invariant under ``generators``."""
    vecs: list[np.ndarray] = []

    def add(v):
        for q in vecs:
            v = v - np.vdot(q, v) * q
        for q in vecs:
            v = v - np.vdot(q, v) * q
        nv = np.linalg.norm(v)
        if nv > tol:
            vecs.append(v / nv)
            return True
        return False

    for s in states:
        add(np.asarray(s, complex))
    frontier = list(range(len(vecs)))
    while frontier:
        start = len(vecs)
        for i in frontier:
            for g in generators:
                add(g @ vecs[i])
        frontier = list(range(start, len(vecs)))
    return np.array(vecs).T


@dataclass
class ControlProblem:
    """Everything the cost needs except the pulse parameters.

    ``psi`` and ``phi`` hold trajectory start states and targets as rows in
    the full space; ``g_theta`` is the diagonal of the single-qubit
    generator.  ``Q`` spans the invariant subspace used for propagation.
    """

    ct: CoeffTensor
    basis: LieBasis
    sc: StructureConstants
    psi: np.ndarray
    phi: np.ndarray
    g_theta: np.ndarray
    T_min: float
    T_max: float
    lambda_T: float = 0.0
    eps_star: float = 1e-6
    k_D: int | None = None
    Q: np.ndarray | None = None
    gt: GradTensors | None = None
    L_red: np.ndarray = field(init=False, repr=False)
    psi_red: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.psi = np.atleast_2d(np.asarray(self.psi, complex))
        self.phi = np.atleast_2d(np.asarray(self.phi, complex))
        if self.psi.shape != self.phi.shape:
            raise ValidationError("psi and phi must have matching shapes")
        if not 0 < self.T_min <= self.T_max:
            raise ValidationError("need 0 < T_min <= T_max")
        if self.Q is None:
            self.Q = np.eye(self.basis.dim_h, dtype=complex)
        if self.gt is None:
            self.gt = build_grad_tensors(self.ct)
        Qh = self.Q.conj().T
        self.L_red = np.einsum("ai,mab,bj->mij", self.Q.conj(), self.basis.elements, self.Q)
        self.psi_red = self.psi @ Qh.T
        lost = np.linalg.norm(self.psi_red @ self.Q.T - self.psi)
        if lost > 1e-10:
            raise ValidationError("trajectory states are not contained in the propagation subspace")

    @property
    def R(self) -> int:
        return self.psi.shape[0]

    def chi(self, theta: float) -> tuple[np.ndarray, np.ndarray]:
        """Reduced ``R(theta)^dagger phi_r`` and its theta-derivative (rows)."""
        phase = np.exp(1j * theta * self.g_theta)
        back = self.phi * phase
        dback = back * (1j * self.g_theta)
        Qc = self.Q.conj()
        return back @ Qc, dback @ Qc


def build_problem(A, B, ct: CoeffTensor, basis: LieBasis, sc: StructureConstants, target, states,
                  g_theta, T_min: float, T_max: float, lambda_T: float = 0.0, eps_star: float = 1e-6,
                  k_D: int | None = None, reduce: bool = True) -> ControlProblem:
    """Assemble a problem with ``phi_r = target @ psi_r``."""
    states = np.array([np.asarray(s, complex) for s in states])
    target = np.asarray(target, complex)
    phi = states @ target.T
    Q = invariant_subspace(states, [np.asarray(A, complex), np.asarray(B, complex)]) if reduce else None
    return ControlProblem(ct, basis, sc, states, phi, np.asarray(g_theta, float), T_min, T_max,
                          lambda_T, eps_star, k_D, Q)


def rydberg_problem(n: int, phi: float, k_M: int = 8, Gamma: int = 12, L: int = 1,
                    T_min: float = 4.0, T_max: float = 18.0, lambda_T: float = 0.0,
                    eps_star: float = 1e-6, reduce: bool = True, compiled=None,
                    k_D: int | None = None) -> ControlProblem:
    """``C_kP(phi)`` on ``n`` blockade atoms with the ``n + 1`` symmetric trajectory states."""
    from .coeffs import build_coefficients
    from .models import build_model, ckp_gate, rz_generator, symmetric_basis_states

    A, B = build_model("rydberg", n)
    if compiled is None:
        compiled = build_coefficients(A, B, k_M, Gamma, 2 * L + 1)
    ct, basis, sc = compiled
    if ct.m < 2 * L + 1:
        raise ValidationError("coefficient tensor degree too low for the spline order")
    return build_problem(A, B, ct, basis, sc, ckp_gate(n, phi, 3), symmetric_basis_states(n, 3),
                         rz_generator(n, 3), T_min, T_max, lambda_T, eps_star, k_D, reduce=reduce)


@dataclass
class Evaluation:
    J: float
    J_T: float
    overlaps: np.ndarray
    eps: np.ndarray
    grad_h: np.ndarray | None = None
    grad_theta: float | None = None

    @property
    def total(self) -> float:
        return self.J + self.J_T

    @property
    def sum_eps(self) -> float:
        return float(self.eps.sum())


def _segment_unitaries(problem: ControlProblem, a: np.ndarray):
    M = np.einsum("sm,mij->sij", a, problem.L_red)
    M = 0.5 * (M + np.conj(np.swapaxes(M, 1, 2)))
    w, V = np.linalg.eigh(M)
    return np.einsum("sij,sj,skj->sik", V, np.exp(-1j * w), V.conj()), w, V


def _divided_differences(w: np.ndarray) -> np.ndarray:
    """``Phi[j, k] = (e^{-i w_j} - e^{-i w_k}) / (w_j - w_k)``, ``-i e^{-i w_j}`` on the diagonal."""
    e = np.exp(-1j * w)
    dw = w[:, None] - w[None, :]
    close = np.abs(dw) < 1e-8
    # near-degenerate pairs use the midpoint derivative
    mid = -1j * np.exp(-0.5j * (w[:, None] + w[None, :]))
    safe = np.where(close, 1.0, dw)
    return np.where(close, mid, (e[:, None] - e[None, :]) / safe)


def evaluate(problem: ControlProblem, h: HermiteSpline, theta: float, gradient: bool = True) -> Evaluation:
    """Cost, per-trajectory overlaps, per-segment truncation errors and (optionally) the gradient."""
    ct = problem.ct
    if ct.m < h.m:
        raise ValidationError(f"spline degree {h.m} exceeds the tensor degree {ct.m}")
    segs = spline_to_segments(h)
    a_orders = eval_coeffs_batch(ct, segs.dt, segs.coeffs)
    eps = np.array([truncation_error(a_orders[s, -1], problem.basis.l1_norms) for s in range(h.S)])
    a = a_orders.sum(axis=1)
    Us, w_eig, V_eig = _segment_unitaries(problem, a)

    f = problem.psi_red.T.copy()
    forward = [f]
    for U in Us:
        f = U @ f
        forward.append(f)
    chi, dchi = problem.chi(theta)
    overlaps = np.einsum("ri,ir->r", chi.conj(), f)
    J = 0.5 * float(np.sum(1.0 - overlaps.real))
    J_T = problem.lambda_T * h.T
    ev = Evaluation(J, J_T, overlaps, eps)
    if not gradient:
        return ev

    ev.grad_theta = -0.5 * float(np.sum(np.einsum("ri,ir->r", dchi.conj(), f).real))
    dadc = segment_jacobian(problem.gt, ct, segs.dt, segs.coeffs)[:, :h.m + 2]
    use_basis = problem.basis.closed
    grad_c = np.zeros((h.S, h.m + 2))
    b = chi.T.copy()
    for s in range(h.S - 1, -1, -1):
        if problem.k_D is None:
            # exact derivative of exp(-iM): Re Tr(dU[X] P) = Re Tr(X V (Phi^T o V^+ P V) V^+)
            V = V_eig[s]
            P = forward[s] @ b.conj().T
            K = V @ (_divided_differences(w_eig[s]).T * (V.conj().T @ P @ V)) @ V.conj().T
            v = np.einsum("mij,ji->m", problem.L_red, K).real
            b = Us[s].conj().T @ b
            grad_c[s] = -0.5 * (dadc[s] @ v)
            continue
        b = Us[s].conj().T @ b
        F = forward[s] @ b.conj().T
        if use_basis:
            w = np.einsum("mij,ji->m", problem.L_red, F).imag
            v = dexp_series_matrix(problem.sc, a[s], problem.k_D).T @ w
        else:
            # trace pairing moves the adjoint series onto F: Tr(ad^j(X) F) = Tr(X (-ad)^j F)
            Mred = np.einsum("m,mij->ij", a[s], problem.L_red)
            term = F
            Ft = F.copy()
            for j in range(1, problem.k_D + 1):
                term = -1j * (Mred @ term - term @ Mred)
                Ft = Ft + term / math.factorial(j + 1)
            v = np.einsum("mij,ji->m", problem.L_red, Ft).imag
        grad_c[s] = -0.5 * (dadc[s] @ v)
    grad_h = pullback(h, grad_c)
    grad_h[-h.S:] += problem.lambda_T
    ev.grad_h = grad_h
    return ev


def cost(problem: ControlProblem, h: HermiteSpline, theta: float) -> tuple[float, np.ndarray]:
    """Total cost ``J + J_T`` and the per-trajectory overlaps."""
    ev = evaluate(problem, h, theta, gradient=False)
    return ev.total, ev.overlaps


def gradient(problem: ControlProblem, h: HermiteSpline, theta: float) -> tuple[np.ndarray, float]:
    """``(dJ/dh, dJ/dtheta)`` of the total cost."""
    ev = evaluate(problem, h, theta, gradient=True)
    return ev.grad_h, ev.grad_theta


# --------------------------------------------------------------------------- optimiser

@dataclass
class TraceRecord:
    iteration: int
    J: float
    J_T: float
    T: float
    S: int
    dim_h: int
    sum_eps: float
    event: str = ""


@dataclass
class OptimizerTrace:
    records: list[TraceRecord] = field(default_factory=list)
    status: str = ""
    wall_time: float = 0.0
    resample_jumps: list[float] = field(default_factory=list)

    def add(self, rec: TraceRecord) -> None:
        if self.records and rec.iteration < self.records[-1].iteration:
            raise ValidationError("trace iterations must not decrease")
        self.records.append(rec)

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "J", "J_T", "T", "S", "dim_h", "sum_eps", "event"])
        for r in self.records:
            w.writerow([r.iteration, repr(r.J), repr(r.J_T), repr(r.T), r.S, r.dim_h, repr(r.sum_eps), r.event])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> OptimizerTrace:
        """Inverse of :meth:`to_csv` (status, wall time and jumps are not stored)."""
        rows = list(csv.DictReader(io.StringIO(text)))
        trace = cls()
        for r in rows:
            trace.add(TraceRecord(int(r["iter"]), float(r["J"]), float(r["J_T"]), float(r["T"]), int(r["S"]),
                                  int(r["dim_h"]), float(r["sum_eps"]), r["event"]))
        return trace


def dt_bounds(problem: ControlProblem, S: int) -> tuple[float, float]:
    return problem.T_min / S, problem.T_max / S


def _fit_bounds(problem: ControlProblem, h: HermiteSpline) -> HermiteSpline:
    lo, hi = dt_bounds(problem, h.S)
    dt = np.clip(h.dt, lo, hi)
    if np.array_equal(dt, h.dt):
        return h
    return HermiteSpline(h.L, dt, h.nodes.copy())


def _resample_within_bounds(problem: ControlProblem, h: HermiteSpline, new_S: int,
                            max_segments: int) -> HermiteSpline:
    """Exact resample to the smallest count ``>= new_S`` whose pieces fit the duration box.

    Splitting a non-uniform spline into ``new_S`` pieces can leave pieces
    outside ``[T_min/new_S, T_max/new_S]``; clipping them would change the
    pulse, so larger counts are tried first.  Clipping is the fallback when
    no count up to ``max_segments`` fits (e.g. ``T`` pinned at a bound).
    """
    tol = 1e-12
    for S in range(new_S, max_segments + 1):
        cand = resample(h, S)
        lo, hi = dt_bounds(problem, S)
        if cand.dt.min() >= lo * (1 - tol) and cand.dt.max() <= hi * (1 + tol):
            return HermiteSpline(cand.L, np.clip(cand.dt, lo, hi), cand.nodes)
    return _fit_bounds(problem, resample(h, new_S))


def refine_until(problem: ControlProblem, h: HermiteSpline, theta: float, growth: float = 1.5,
                 max_segments: int = MAX_SEGMENTS) -> tuple[HermiteSpline, Evaluation, int]:
    """Resample upward until the summed truncation error is at most ``0.1 eps_star``."""
    ev = evaluate(problem, h, theta, gradient=False)
    events = 0
    while ev.sum_eps > 0.1 * problem.eps_star:
        new_S = max(h.S + 1, math.ceil(growth * h.S))
        if new_S > max_segments:
            raise ResourceError(f"resampling would exceed {max_segments} segments "
                                f"(sum eps = {ev.sum_eps:.3e})")
        h = _resample_within_bounds(problem, h, new_S, max_segments)
        ev = evaluate(problem, h, theta, gradient=False)
        events += 1
    return h, ev, events


class _Stop(Exception):
    pass


def minimize(problem: ControlProblem, h: HermiteSpline, theta: float = 0.0, max_iter: int = 1000,
             J_target: float | None = None, stall_window: int = 50, stall_rtol: float = 1e-10,
             growth: float = 1.5, max_segments: int = MAX_SEGMENTS, max_time: float | None = None,
             trace: OptimizerTrace | None = None, log=None, maxcor: int = 20):
    """Bounded quasi-Newton (L-BFGS-B) minimisation with truncation-triggered resampling.

    Parameters
    ----------
    problem : ControlProblem
    h : HermiteSpline
        Initial pulse.  Segment durations are clipped into the box
        ``T_min / S <= dt_s <= T_max / S``.
    theta : float
        Initial single-qubit angle (optimised, unbounded).
    max_iter : int
        Total quasi-Newton iterations across restarts.
    J_target : float, optional
        Stop as soon as ``J <= J_target``.  Independently the run stops
        when ``J <= sum_s eps_s``.
    stall_window, stall_rtol : int, float
        Plateau detection: stop when ``J_total`` improved by less than
        ``stall_rtol`` (relative) over ``stall_window`` iterations.
    growth : float
        Segment count growth factor per resampling event.
    max_time : float, optional
        Wall-clock budget in seconds.
    maxcor : int
        Number of curvature pairs kept by L-BFGS-B.

    Returns
    -------
    h, theta, trace
    """
    t_start = time.perf_counter()
    trace = trace or OptimizerTrace()
    it0 = trace.records[-1].iteration + 1 if trace.records else 0
    h = _fit_bounds(problem, h.copy())
    ev = evaluate(problem, h, theta, gradient=False)
    events = 0
    if ev.sum_eps > problem.eps_star:
        h, ev, events = refine_until(problem, h, theta, growth, max_segments)
    trace.add(TraceRecord(it0, ev.J, ev.J_T, h.T, h.S, h.n_params + 1, ev.sum_eps,
                          "start" + (f"+resample{events}" if events else "")))
    iteration = it0
    history: list[float] = [ev.total]
    status = ""

    def done(ev: Evaluation) -> str:
        if J_target is not None and ev.J <= J_target:
            return "target"
        if ev.J <= ev.sum_eps:
            return "converged"
        return ""

    status = done(ev)
    while not status:
        if iteration - it0 >= max_iter:
            status = "max_iter"
            break
        S = h.S
        L = h.L
        lo, hi = dt_bounds(problem, S)
        bounds = [(None, None)] * ((S + 1) * (L + 1)) + [(lo, hi)] * S + [(None, None)]
        x0 = np.concatenate([h.to_vector(), [theta]])
        run_start = ev.total
        cache: dict = {}

        def unpack(x):
            return HermiteSpline.from_vector(x[:-1], L, S), float(x[-1])

        def fun(x):
            key = x.tobytes()
            if key not in cache:
                hh, th = unpack(x)
                e = evaluate(problem, hh, th, gradient=True)
                cache.clear()
                cache[key] = e
            e = cache[key]
            return e.total, np.concatenate([e.grad_h, [e.grad_theta]])

        reason = {"why": ""}

        def callback(intermediate_result):
            nonlocal iteration, h, theta, ev
            x = intermediate_result.x
            h, theta = unpack(x)
            key = x.tobytes()
            ev = cache[key] if key in cache else evaluate(problem, h, theta, gradient=False)
            iteration += 1
            history.append(ev.total)
            event = ""
            why = done(ev)
            if ev.sum_eps > problem.eps_star:
                why = why or "resample"
            elif not why and len(history) > stall_window:
                old = history[-stall_window - 1]
                if old - ev.total <= stall_rtol * abs(old):
                    why = "plateau"
            if not why and iteration - it0 >= max_iter:
                why = "max_iter"
            if not why and max_time is not None and time.perf_counter() - t_start > max_time:
                why = "time"
            if why and why != "resample":
                event = why
            trace.add(TraceRecord(iteration, ev.J, ev.J_T, h.T, h.S, h.n_params + 1, ev.sum_eps, event))
            if log is not None and (iteration % 25 == 0 or why):
                log(f"iter {iteration} J={ev.J:.3e} T={h.T:.4f} S={h.S} sum_eps={ev.sum_eps:.2e} {why}")
            if why:
                reason["why"] = why
                raise StopIteration

        res = _scipy_minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
                              options={"maxiter": max(1, max_iter - (iteration - it0)), "ftol": 1e-15,
                                       "gtol": 1e-12, "maxcor": maxcor})
        why = reason["why"]
        if log is not None and not why:
            log(f"L-BFGS-B stopped: {res.message}")
        if not why:
            # the optimiser stopped on its own; take its final point and restart it
            # (fresh curvature memory) as long as the previous run made progress
            h, theta = unpack(res.x)
            ev = evaluate(problem, h, theta, gradient=False)
            why = done(ev) or ("resample" if ev.sum_eps > problem.eps_star else "")
            if not why:
                if run_start - ev.total > stall_rtol * abs(run_start):
                    continue
                why = "plateau"
        if why == "resample":
            before = ev.J
            h, ev, events = refine_until(problem, h, theta, growth, max_segments)
            trace.resample_jumps.append(abs(ev.J - before))
            # the stall window restarts with the new segmentation
            history[:] = [ev.total]
            trace.add(TraceRecord(iteration, ev.J, ev.J_T, h.T, h.S, h.n_params + 1, ev.sum_eps,
                                  f"resample{events}"))
            status = done(ev)
            continue
        status = why
    if trace.records[-1].event != status:
        trace.add(TraceRecord(iteration, ev.J, ev.J_T, h.T, h.S, h.n_params + 1, ev.sum_eps, status))
    trace.status = status
    trace.wall_time += time.perf_counter() - t_start
    return h, theta, trace


@dataclass
class StageConfig:
    """One optimisation stage of a sweep.  A stage succeeds when its final ``J <= ok_threshold``."""

    eps_star: float
    lambda_T: float
    T_min: float
    T_max: float
    max_iter: int = 2000
    J_target: float | None = None
    ok_threshold: float = 1e-3


@dataclass
class SweepResult:
    phi: float
    stage: int
    h: HermiteSpline
    theta: float
    trace: OptimizerTrace
    ok: bool
    error: str = ""


def sweep_ckp(n: int, phi_grid, stages: list[StageConfig], h0: HermiteSpline, theta0: float = 0.0,
              compiled=None, k_M: int = 8, Gamma: int = 12, out_dir=None, log=None,
              max_time_per_stage: float | None = None) -> list[SweepResult]:
    """Warm-started ``C_kP(phi)`` sweep.

    Each phi runs ``stages`` in order, starting from the last pulse that
    passed its stage.  Failed stages are recorded and skipped over.
    """
    from pathlib import Path

    from .spline import write_spline

    phis = [float(p) for p in phi_grid]
    if any(b <= a for a, b in zip(phis, phis[1:])):
        raise ValidationError("phi grid must be strictly increasing")
    results = []
    h, theta = h0.copy(), float(theta0)
    for phi in phis:
        for si, st in enumerate(stages):
            problem = rydberg_problem(n, phi, k_M=k_M, Gamma=Gamma, L=h.L, T_min=st.T_min, T_max=st.T_max,
                                      lambda_T=st.lambda_T, eps_star=st.eps_star, compiled=compiled)
            compiled = (problem.ct, problem.basis, problem.sc)
            try:
                h_new, th_new, tr = minimize(problem, h, theta, max_iter=st.max_iter, J_target=st.J_target,
                                             max_time=max_time_per_stage, log=log)
            except Exception as exc:  # noqa: BLE001 - a failed stage is recorded and the sweep goes on
                results.append(SweepResult(phi, si, h, theta, OptimizerTrace(status="error"), False, str(exc)))
                continue
            ok = tr.final.J <= st.ok_threshold
            results.append(SweepResult(phi, si, h_new, th_new, tr, ok))
            if ok:
                h, theta = h_new, th_new
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                write_spline(h_new, Path(out_dir) / f"pulse_phi{phi:.6f}_stage{si}.txt", theta=th_new)
                (Path(out_dir) / f"trace_phi{phi:.6f}_stage{si}.csv").write_text(tr.to_csv())
    return results
