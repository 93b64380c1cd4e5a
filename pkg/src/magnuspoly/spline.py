"""Hermite-spline control pulses.

A spline of class ``C^L`` on ``S`` segments is given by node data
``nodes[s, l] = d^(l)(tau_s)`` for ``s = 0..S`` and ``l = 0..L`` plus
segment durations ``dt[s]``.  Segment ``s`` is the unique polynomial of
degree ``m = 2L + 1`` in local time ``u in [0, dt_s]``,

    d(u) = sum_n c_n u^n / n!,

matching the node data at both ends.  The parameter vector is
``h = (nodes.ravel(), dt)`` of length ``(S + 1)(L + 1) + S``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from math import factorial
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .evaluate import control_derivative


@dataclass
class HermiteSpline:
    L: int
    dt: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        self.dt = np.asarray(self.dt, dtype=float).reshape(-1)
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.L < 0:
            raise ValidationError("L must be >= 0")
        if self.nodes.shape != (len(self.dt) + 1, self.L + 1):
            raise ValidationError(f"nodes must have shape ({len(self.dt) + 1}, {self.L + 1})")
        if len(self.dt) < 1 or not np.all(self.dt > 0) or not np.all(np.isfinite(self.dt)):
            raise ValidationError("segment durations must be positive and finite")
        if not np.all(np.isfinite(self.nodes)):
            raise ValidationError("node values must be finite")

    @property
    def S(self) -> int:
        return len(self.dt)

    @property
    def m(self) -> int:
        return 2 * self.L + 1

    @property
    def T(self) -> float:
        return float(self.dt.sum())

    @property
    def n_params(self) -> int:
        return (self.S + 1) * (self.L + 1) + self.S

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.nodes.ravel(), self.dt])

    @classmethod
    def from_vector(cls, vec, L: int, S: int) -> HermiteSpline:
        vec = np.asarray(vec, dtype=float)
        n_nodes = (S + 1) * (L + 1)
        if vec.shape != (n_nodes + S,):
            raise ValidationError("parameter vector has the wrong length")
        return cls(L, vec[n_nodes:].copy(), vec[:n_nodes].reshape(S + 1, L + 1).copy())

    def node_times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dt)])

    def copy(self) -> HermiteSpline:
        return HermiteSpline(self.L, self.dt.copy(), self.nodes.copy())


def _end_matrix(L: int, dt: float) -> np.ndarray:
    """``K`` with ``K @ c = (d^(l)(0))_l + (d^(l)(dt))_l`` for ``c`` of length ``2L + 2``."""
    m = 2 * L + 1
    K = np.zeros((2 * L + 2, m + 1))
    for l in range(L + 1):
        K[l, l] = 1.0
        for n in range(l, m + 1):
            K[L + 1 + l, n] = dt ** (n - l) / factorial(n - l)
    return K


def _end_matrix_dt(L: int, dt: float) -> np.ndarray:
    m = 2 * L + 1
    dK = np.zeros((2 * L + 2, m + 1))
    for l in range(L + 1):
        for n in range(l + 1, m + 1):
            dK[L + 1 + l, n] = dt ** (n - l - 1) / factorial(n - l - 1)
    return dK


@dataclass
class SegmentPolynomials:
    """Per-segment coordinates ``(dt_s, c_0..c_m)``."""

    dt: np.ndarray
    coeffs: np.ndarray

    @property
    def S(self) -> int:
        return len(self.dt)

    def value(self, t) -> np.ndarray:
        """Pulse value at global times ``t`` (right-continuous at interior nodes)."""
        return self.derivative(t, 0)

    def derivative(self, t, order: int) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        edges = np.concatenate([[0.0], np.cumsum(self.dt)])
        seg = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, self.S - 1)
        out = np.empty_like(t)
        for s in np.unique(seg):
            sel = seg == s
            out[sel] = control_derivative(self.coeffs[s], t[sel] - edges[s], order)
        return out


def spline_to_segments(h: HermiteSpline) -> SegmentPolynomials:
    """Solve the Hermite end conditions for every segment."""
    L = h.L
    coeffs = np.empty((h.S, h.m + 1))
    for s in range(h.S):
        K = _end_matrix(L, h.dt[s])
        rhs = np.concatenate([h.nodes[s], h.nodes[s + 1]])
        try:
            coeffs[s] = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            raise ValidationError(f"singular Hermite system in segment {s}") from exc
    return SegmentPolynomials(h.dt.copy(), coeffs)


def segment_jacobian_blocks(h: HermiteSpline) -> np.ndarray:
    """``d(dt_s, c_s) / d(nodes_s, nodes_{s+1}, dt_s)`` per segment, shape ``(S, m + 2, 2L + 3)``.

    From the variational constraints ``K dc + (dK/ddt c) ddt = dh`` the
    block is ``pinv(K) [I | -dK/ddt c]`` with the pseudo-inverse cut at
    ``1e-12`` of the largest singular value.
    """
    L = h.L
    n = 2 * L + 2
    segs = spline_to_segments(h)
    blocks = np.zeros((h.S, h.m + 2, n + 1))
    for s in range(h.S):
        K = _end_matrix(L, h.dt[s])
        Kp = np.linalg.pinv(K, rcond=1e-12)
        rhs = np.hstack([np.eye(n), -(_end_matrix_dt(L, h.dt[s]) @ segs.coeffs[s])[:, None]])
        blocks[s, 0, n] = 1.0
        blocks[s, 1:] = Kp @ rhs
    return blocks


def spline_jacobian(h: HermiteSpline) -> np.ndarray:
    """Dense Jacobian ``dc/dh`` with rows ``(dt_s, c_s)`` stacked per segment and columns ``h``."""
    L1 = h.L + 1
    blocks = segment_jacobian_blocks(h)
    n_nodes = (h.S + 1) * L1
    J = np.zeros((h.S * (h.m + 2), h.n_params))
    for s in range(h.S):
        rows = slice(s * (h.m + 2), (s + 1) * (h.m + 2))
        J[rows, s * L1:(s + 2) * L1] = blocks[s, :, :2 * L1]
        J[rows, n_nodes + s] = blocks[s, :, 2 * L1]
    return J


def pullback(h: HermiteSpline, grad_c: np.ndarray) -> np.ndarray:
    """``(dc/dh)^T grad_c`` for ``grad_c`` of shape ``(S, m + 2)`` without forming the dense Jacobian."""
    L1 = h.L + 1
    blocks = segment_jacobian_blocks(h)
    n_nodes = (h.S + 1) * L1
    out = np.zeros(h.n_params)
    for s in range(h.S):
        g = grad_c[s] @ blocks[s]
        out[s * L1:(s + 2) * L1] += g[:2 * L1]
        out[n_nodes + s] += g[2 * L1]
    return out


def _split_counts(dt: np.ndarray, new_S: int) -> np.ndarray:
    # greedy refinement: each extra node splits the segment whose current pieces are longest
    q = np.ones(len(dt), dtype=int)
    for _ in range(new_S - len(dt)):
        q[int(np.argmax(dt / q))] += 1
    return q


def resample(h: HermiteSpline, new_S: int) -> HermiteSpline:
    """Refine to ``new_S`` segments without changing the pulse.

    Every old segment is split into equal pieces, with the extra pieces
    given to the segments whose pieces are currently longest, so the new
    durations stay proportional to the old ones.  All old nodes are kept
    and new node data are read off the old segment polynomials, which makes
    the refined spline reproduce the pulse exactly.
    """
    if new_S <= h.S:
        raise ValidationError("new_S must exceed the current segment count")
    segs = spline_to_segments(h)
    q = _split_counts(h.dt, new_S)
    dts = []
    nodes = []
    for s in range(h.S):
        piece = h.dt[s] / q[s]
        for j in range(q[s]):
            u = j * piece
            if j == 0:
                nodes.append(h.nodes[s])
            else:
                nodes.append([float(control_derivative(segs.coeffs[s], u, l)) for l in range(h.L + 1)])
            dts.append(piece)
    nodes.append(h.nodes[-1])
    return HermiteSpline(h.L, np.array(dts), np.array(nodes))


def spline_from_function(func, T: float, S: int, L: int) -> HermiteSpline:
    """Sample ``func(t, l)`` (the ``l``-th derivative at global times ``t``) onto a uniform spline."""
    if S < 1 or T <= 0:
        raise ValidationError("need S >= 1 and T > 0")
    times = np.linspace(0.0, T, S + 1)
    nodes = np.stack([np.asarray(func(times, l), float) for l in range(L + 1)], axis=1)
    return HermiteSpline(L, np.full(S, T / S), nodes)


def cosine_pulse(amplitude: float = 0.1, period: float = 3.0):
    """Derivative oracle for ``amplitude * cos(2 pi t / period)``."""
    w = 2 * np.pi / period

    def func(t, l):
        return amplitude * w ** l * np.cos(w * np.asarray(t, float) + l * np.pi / 2)

    return func


def write_spline(h: HermiteSpline, path=None, theta: float | None = None) -> str:
    """Plain-text pulse: one row per node, ``dt h_0 .. h_L`` (last row ``dt = 0``)."""
    buf = io.StringIO()
    buf.write(f"# hermite-spline L={h.L} S={h.S} T={h.T!r}")
    if theta is not None:
        buf.write(f" theta={float(theta)!r}")
    buf.write("\n# columns: dt " + " ".join(f"h{l}" for l in range(h.L + 1)) + "\n")
    for s in range(h.S + 1):
        dt = h.dt[s] if s < h.S else 0.0
        buf.write(" ".join(repr(float(x)) for x in [dt, *h.nodes[s]]) + "\n")
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_spline(path_or_text) -> tuple[HermiteSpline, float | None]:
    """Inverse of :func:`write_spline`; returns the spline and the stored theta (if any)."""
    text = str(path_or_text)
    if "\n" not in text:
        text = Path(text).read_text()
    L = None
    theta = None
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("L="):
                    L = int(tok[2:])
                elif tok.startswith("theta="):
                    theta = float(tok[6:])
            continue
        try:
            rows.append([float(x) for x in line.split()])
        except ValueError as exc:
            raise ValidationError(f"malformed spline row {line!r}") from exc
    if L is None or len(rows) < 2:
        raise ValidationError("malformed spline file")
    arr = np.array(rows)
    if arr.shape[1] != L + 2:
        raise ValidationError("spline rows do not match L")
    return HermiteSpline(L, arr[:-1, 0], arr[:, 1:]), theta


def pulse_value(h: HermiteSpline, t) -> np.ndarray:
    return spline_to_segments(h).value(t)


__all__ = [
    "HermiteSpline",
    "SegmentPolynomials",
    "spline_to_segments",
    "spline_jacobian",
    "segment_jacobian_blocks",
    "pullback",
    "resample",
    "spline_from_function",
    "cosine_pulse",
    "write_spline",
    "read_spline",
    "pulse_value",
]
