"""Compilation of the Magnus expansion into sparse polynomial coefficient tensors.

For ``H(t) = A + d(t) B`` with ``d(t) = sum_g d_g t^g / g!`` the truncated
expansion is ``M(t, d) = sum_mu a_mu(t, d) L_mu`` with

    a_mu = sum_{k, p, gamma} T[k, p, mu, gamma] * t^k * prod_i (d_{gamma_i} t^{gamma_i})

where ``gamma`` runs over sorted tuples with ``k + sum(gamma) <= Gamma``.
``S`` is the same tensor before symmetrisation, indexed by ordered tuples.

Artifact layout (all little-endian)::

    magic         8s   b"MAGPOLY\\0"
    version       u32
    k_M, Gamma, m, dim_g, dim_H, max_depth, closed   7 x u32
    n_entries     u64
    eps_L         f64
    digest        32s  sha256 of (A, B, eps_L, k_M, Gamma, m)
    A, B          dim_H*dim_H complex each, row-major, (re, im) f64 pairs
    basis         dim_g matrices, same layout
    depth         dim_g x u32
    l1_norms, a_coeffs, b_coeffs      dim_g x f64 each
    entries       n_entries records: k u8, p u8, mu u32, len u8, gamma u8[len], value f64
    checksum      32s  sha256 of every preceding byte
"""
from __future__ import annotations

import hashlib
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from math import factorial, prod
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ClosureError, ConventionError, ValidationError
from .lie import (
    DEFAULT_EPS_L,
    LieBasis,
    StructureConstants,
    as_hermitian,
    compute_structure_constants,
    generate_lie_algebra,
)
from .trees import (
    all_placement_chains,
    enumerate_trees,
    exponent_vectors,
    integral_denominators,
    tree_weight,
)

MAGIC = b"MAGPOLY\0"
FORMAT_VERSION = 1
ENTRY_TOL = 1e-14

Key = tuple[int, int, int, tuple[int, ...]]


def model_digest(A, B, eps_L: float, k_M: int, Gamma: int, m: int) -> bytes:
    A = np.ascontiguousarray(A, dtype="<c16")
    B = np.ascontiguousarray(B, dtype="<c16")
    h = hashlib.sha256()
    h.update(b"magnuspoly-model")
    h.update(struct.pack("<II", *A.shape))
    h.update(A.tobytes())
    h.update(B.tobytes())
    h.update(struct.pack("<dIII", float(eps_L), int(k_M), int(Gamma), int(m)))
    return h.digest()


@dataclass
class STensor:
    """Unsymmetrised coefficients, one dense block per ``(k, p)``.

    ``blocks[(k, p)] = (gammas, values)`` with ``gammas`` of shape
    ``(n, p)`` holding ordered exponent tuples and ``values`` of shape
    ``(n, dim_g)``.
    """

    k_M: int
    Gamma: int
    m: int
    dim_g: int
    blocks: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]

    @property
    def entries(self) -> dict[Key, float]:
        out = {}
        for (k, p), (gammas, values) in sorted(self.blocks.items()):
            for g, row in zip(gammas, values):
                for mu in np.flatnonzero(np.abs(row) > ENTRY_TOL):
                    out[(k, p, int(mu), tuple(int(x) for x in g))] = float(row[mu])
        return out


@dataclass
class CoeffTensor:
    """Symmetrised coefficient tensor, the compiled dynamics of one model."""

    k_M: int
    Gamma: int
    m: int
    dim_g: int
    entries: dict[Key, float]
    basis_l1_norms: np.ndarray
    model_digest: bytes = b""
    eps_L: float = DEFAULT_EPS_L
    _compiled: object = field(default=None, repr=False, compare=False)

    def sorted_keys(self) -> list[Key]:
        return sorted(self.entries)

    def restricted(self, k_max: int) -> CoeffTensor:
        """Copy keeping only orders ``k <= k_max`` (a lower truncation of the same expansion)."""
        if not 1 <= k_max <= self.k_M:
            raise ValidationError(f"k_max must be in 1..{self.k_M}")
        entries = {key: v for key, v in self.entries.items() if key[0] <= k_max}
        return CoeffTensor(k_max, self.Gamma, self.m, self.dim_g, entries,
                           self.basis_l1_norms, self.model_digest, self.eps_L)

    def check_keys(self) -> None:
        """Raise ValidationError if any key falls outside the admissible index set."""
        for (k, p, mu, g) in self.entries:
            ok = (1 <= k <= self.k_M and 0 <= p <= k and len(g) == p and 0 <= mu < self.dim_g
                  and all(g[i] <= g[i + 1] for i in range(p - 1))
                  and all(0 <= x <= self.m for x in g) and k + sum(g) <= self.Gamma)
            if not ok:
                raise ValidationError(f"inadmissible key {(k, p, mu, g)}")


def _ordered_gammas(p: int, max_total: int, m: int) -> list[tuple[int, ...]]:
    return [g for g in product(range(min(m, max_total) + 1), repeat=p) if sum(g) <= max_total]


class _OrderPlan:
    """Index bookkeeping for one expansion order ``k``; independent of the tree."""

    def __init__(self, k: int, Gamma: int, m: int):
        self.k = k
        G = Gamma - k
        self.evecs = exponent_vectors(k, G, m)
        e_index = {tuple(int(x) for x in row): i for i, row in enumerate(self.evecs)}
        self.inv_factorials = [prod(factorial(int(x)) for x in row) for row in self.evecs]
        self.by_p = []
        for p in range(k + 1):
            masks = [mask for mask in range(1 << k) if bin(mask).count("1") == p]
            gammas = _ordered_gammas(p, G, m)
            idx = np.empty((len(masks), len(gammas)), dtype=np.int64)
            for r, mask in enumerate(masks):
                bits = [j for j in range(k) if (mask >> j) & 1]
                for c, g in enumerate(gammas):
                    e = [0] * k
                    for j, gj in zip(bits, g):
                        e[j] = gj
                    idx[r, c] = e_index[tuple(e)]
            self.by_p.append((p, np.array(masks, dtype=np.int64), np.array(gammas, dtype=np.int64).reshape(len(gammas), p), idx))

    def tree_weights(self, tree, alpha) -> np.ndarray:
        # exact alpha * integral * prod 1/e_j!, one correctly rounded division per exponent vector
        dens = integral_denominators(tree, self.evecs)
        num, den = alpha.numerator, alpha.denominator
        return np.array([num / (den * N * f) for N, f in zip(dens, self.inv_factorials)])


def compute_S(basis: LieBasis, sc: StructureConstants, k_M: int, Gamma: int, m: int,
              workers: int = 1) -> STensor:
    """Accumulate ``weight x chain x tree integral`` over trees, placements and exponents.

    Parameters
    ----------
    basis, sc : LieBasis, StructureConstants
        Algebra generated to depth at least ``k_M`` (or closed).
    k_M : int
        Magnus truncation order.
    Gamma : int
        Time truncation order, ``Gamma >= k_M``.
    m : int
        Maximum control polynomial degree.
    workers : int
        Thread count for the per-tree work; the reduction order is fixed.
    """
    if k_M < 1:
        raise ValidationError("k_M must be >= 1")
    if Gamma < k_M:
        raise ValidationError("Gamma must be >= k_M")
    if m < 0:
        raise ValidationError("m must be >= 0")
    if not basis.closed and basis.max_depth < k_M:
        raise ClosureError(f"basis generated to depth {basis.max_depth} < k_M = {k_M}")
    D = basis.dim
    c = sc.tensor
    if c.shape != (D, D, D):
        raise ValidationError("structure constants do not match the basis")

    blocks: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    for k in range(1, k_M + 1):
        # k - 1 Hermitian brackets each carry a factor i relative to [.,.]; with the
        # (-i)^(k-1) prefactor the overall phase must be exactly +1
        phase = (-1j) ** (k - 1) * (1j) ** (k - 1)
        if abs(phase.imag) > 1e-10 or abs(phase.real - 1.0) > 1e-10:
            raise ConventionError(f"non-real phase {phase} at order {k}")
        plan = _OrderPlan(k, Gamma, m)
        acc = [np.zeros((len(gam), D)) for (_, _, gam, _) in plan.by_p]
        trees = [(t, tree_weight(t)) for t in enumerate_trees(k - 1)]
        trees = [(t, w) for t, w in trees if w != 0]
        memo: dict = {}

        def tree_contrib(item):
            tree, alpha = item
            chains = all_placement_chains(tree, basis.a_coeffs, basis.b_coeffs, c, memo)
            w = plan.tree_weights(tree, alpha)
            out = []
            for (p, masks, gam, idx) in plan.by_p:
                W = w[idx]
                X = chains[masks]
                out.append((W[:, :, None] * X[:, None, :]).sum(axis=0))
            return out

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = pool.map(tree_contrib, trees)
                for contrib in results:
                    for i, part in enumerate(contrib):
                        acc[i] += part
        else:
            for item in trees:
                for i, part in enumerate(tree_contrib(item)):
                    acc[i] += part
        for (p, _, gam, _), values in zip(plan.by_p, acc):
            if len(gam):
                blocks[(k, p)] = (gam, values)
    return STensor(k_M, Gamma, m, D, blocks)


def symmetrize_to_T(s: STensor, l1_norms=None, digest: bytes = b"", eps_L: float = DEFAULT_EPS_L) -> CoeffTensor:
    """Sum ``S`` over the distinct permutations of each exponent tuple."""
    entries: dict[Key, float] = {}
    for (k, p), (gammas, values) in sorted(s.blocks.items()):
        if p == 0:
            sorted_rows = gammas
            summed = values
            uniq = gammas
        else:
            sorted_rows = np.sort(gammas, axis=1)
            uniq, inv = np.unique(sorted_rows, axis=0, return_inverse=True)
            summed = np.zeros((len(uniq), s.dim_g))
            np.add.at(summed, inv.reshape(-1), values)
        for g, row in zip(uniq, summed):
            g = tuple(int(x) for x in g)
            for mu in np.flatnonzero(np.abs(row) > ENTRY_TOL):
                v = float(row[mu])
                if not np.isfinite(v):
                    raise ValidationError("non-finite coefficient")
                entries[(k, p, int(mu), g)] = v
    entries = dict(sorted(entries.items()))
    if l1_norms is None:
        l1_norms = np.ones(s.dim_g)
    return CoeffTensor(s.k_M, s.Gamma, s.m, s.dim_g, entries, np.asarray(l1_norms, float), digest, eps_L)


def build_coefficients(A, B, k_M: int, Gamma: int, m: int, eps_L: float = DEFAULT_EPS_L,
                       workers: int = 1) -> tuple[CoeffTensor, LieBasis, StructureConstants]:
    """Generate the algebra, its structure constants and the symmetrised tensor for ``(A, B)``."""
    A = as_hermitian(A, "A")
    B = as_hermitian(B, "B")
    basis = generate_lie_algebra(A, B, max_depth=k_M, eps_L=eps_L)
    sc = compute_structure_constants(basis)
    s = compute_S(basis, sc, k_M, Gamma, m, workers=workers)
    digest = model_digest(A, B, eps_L, k_M, Gamma, m)
    ct = symmetrize_to_T(s, basis.l1_norms, digest, eps_L)
    return ct, basis, sc


# --------------------------------------------------------------------------- artifact IO

def _complex_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<c16").tobytes()


def serialize_artifact(ct: CoeffTensor, basis: LieBasis, A, B) -> bytes:
    A = np.asarray(A, complex)
    B = np.asarray(B, complex)
    dim_h = A.shape[0]
    if basis.dim != ct.dim_g or basis.dim_h != dim_h:
        raise ValidationError("basis does not match tensor or generators")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<7I", ct.k_M, ct.Gamma, ct.m, ct.dim_g, dim_h, basis.max_depth, int(basis.closed)))
    buf.write(struct.pack("<Q", len(ct.entries)))
    buf.write(struct.pack("<d", ct.eps_L))
    buf.write(ct.model_digest.ljust(32, b"\0")[:32])
    buf.write(_complex_bytes(A))
    buf.write(_complex_bytes(B))
    buf.write(_complex_bytes(basis.elements))
    buf.write(np.asarray(basis.depth, dtype="<u4").tobytes())
    for vec in (basis.l1_norms, basis.a_coeffs, basis.b_coeffs):
        buf.write(np.asarray(vec, dtype="<f8").tobytes())
    for key in ct.sorted_keys():
        k, p, mu, g = key
        buf.write(struct.pack("<BBIB", k, p, mu, len(g)))
        buf.write(bytes(g))
        buf.write(struct.pack("<d", ct.entries[key]))
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_artifact(ct: CoeffTensor, basis: LieBasis, path, A, B) -> None:
    """Write the binary artifact.  ``A`` and ``B`` are stored so the digest can be re-verified."""
    Path(path).write_bytes(serialize_artifact(ct, basis, A, B))


@dataclass
class Artifact:
    tensor: CoeffTensor
    basis: LieBasis
    A: np.ndarray
    B: np.ndarray
    version: int


def read_artifact(path) -> Artifact:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read artifact {path}: {exc}") from exc
    return parse_artifact(data)


def parse_artifact(data: bytes) -> Artifact:
    if len(data) < len(MAGIC) + 4 + 32 or data[:8] != MAGIC:
        raise ArtifactError("not a coefficient artifact (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise ArtifactError(f"unsupported artifact version {version} (expected {FORMAT_VERSION})")
    body, checksum = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise ArtifactError("artifact checksum mismatch (corrupt file)")
    try:
        off = 12
        k_M, Gamma, m, dim_g, dim_h, max_depth, closed = struct.unpack_from("<7I", body, off)
        off += 28
        (n_entries,) = struct.unpack_from("<Q", body, off)
        off += 8
        (eps_L,) = struct.unpack_from("<d", body, off)
        off += 8
        digest = body[off:off + 32]
        off += 32

        def take_complex(count):
            nonlocal off
            nbytes = 16 * count
            arr = np.frombuffer(body, dtype="<c16", count=count, offset=off).astype(complex)
            off += nbytes
            return arr

        def take(dtype, count, size):
            nonlocal off
            arr = np.frombuffer(body, dtype=dtype, count=count, offset=off)
            off += size * count
            return arr

        A = take_complex(dim_h * dim_h).reshape(dim_h, dim_h)
        B = take_complex(dim_h * dim_h).reshape(dim_h, dim_h)
        elements = take_complex(dim_g * dim_h * dim_h).reshape(dim_g, dim_h, dim_h)
        depth = take("<u4", dim_g, 4).astype(int)
        l1 = take("<f8", dim_g, 8).astype(float)
        a_coeffs = take("<f8", dim_g, 8).astype(float)
        b_coeffs = take("<f8", dim_g, 8).astype(float)
        entries: dict[Key, float] = {}
        for _ in range(n_entries):
            k, p, mu, glen = struct.unpack_from("<BBIB", body, off)
            off += 7
            g = tuple(body[off:off + glen])
            off += glen
            (v,) = struct.unpack_from("<d", body, off)
            off += 8
            entries[(k, p, mu, g)] = v
    except (struct.error, ValueError) as exc:
        raise ArtifactError(f"truncated or malformed artifact: {exc}") from exc
    if off != len(body):
        raise ArtifactError("trailing bytes in artifact")
    if model_digest(A, B, eps_L, k_M, Gamma, m) != digest:
        raise ArtifactError("model digest mismatch")
    basis = LieBasis(elements, depth, l1, a_coeffs, b_coeffs, max_depth, bool(closed))
    ct = CoeffTensor(k_M, Gamma, m, dim_g, entries, l1, digest, eps_L)
    return Artifact(ct, basis, A, B, version)


def load_artifact(path) -> tuple[CoeffTensor, LieBasis]:
    """Load and verify an artifact written by :func:`save_artifact`."""
    art = read_artifact(path)
    return art.tensor, art.basis


def export_text(ct: CoeffTensor, basis: LieBasis, path=None) -> str:
    """Human-readable dump of the artifact content (for debugging)."""
    lines = [
        f"# k_M={ct.k_M} Gamma={ct.Gamma} m={ct.m} dim_g={ct.dim_g} dim_H={basis.dim_h} "
        f"eps_L={ct.eps_L!r} digest={ct.model_digest.hex()}",
        "# basis: index depth l1_norm a_coeff b_coeff",
    ]
    for mu in range(basis.dim):
        lines.append(f"L {mu} {basis.depth[mu]} {basis.l1_norms[mu]!r} {basis.a_coeffs[mu]!r} {basis.b_coeffs[mu]!r}")
    lines.append("# entries: k p mu gamma value")
    for key in ct.sorted_keys():
        k, p, mu, g = key
        lines.append(f"T {k} {p} {mu} {','.join(map(str, g)) or '-'} {ct.entries[key]!r}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
