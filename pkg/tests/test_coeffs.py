from math import factorial

import numpy as np
import pytest

from conftest import X, Z, random_hermitian
from magnuspoly.coeffs import (
    STensor,
    build_coefficients,
    compute_S,
    export_text,
    load_artifact,
    parse_artifact,
    save_artifact,
    serialize_artifact,
    symmetrize_to_T,
)
from magnuspoly.errors import ArtifactError, ClosureError, ValidationError
from magnuspoly.evaluate import assemble, eval_coeffs
from magnuspoly.lie import compute_structure_constants, generate_lie_algebra
from magnuspoly.verify import quadrature_oracle


def test_first_order_closed_form():
    ct, basis, _ = build_coefficients(Z, X, 1, 4, 3)
    expect = {}
    for mu in range(basis.dim):
        if abs(basis.a_coeffs[mu]) > 1e-14:
            expect[(1, 0, mu, ())] = basis.a_coeffs[mu]
        for g in range(4):
            if abs(basis.b_coeffs[mu]) > 1e-14:
                expect[(1, 1, mu, (g,))] = basis.b_coeffs[mu] / factorial(g) / (g + 1)
    assert set(ct.entries) == set(expect)
    for key, v in expect.items():
        assert ct.entries[key] == pytest.approx(v, rel=1e-14)


def test_second_order_constant_slice_vanishes(toy_k3):
    ct = toy_k3[0]
    assert not any(k == 2 and p == 0 for (k, p, _, _) in ct.entries)


def test_symmetrize_example():
    s = STensor(2, 4, 1, 1, {(2, 2): (np.array([[0, 1], [1, 0]]), np.array([[2.0], [3.0]]))})
    assert symmetrize_to_T(s).entries == {(2, 2, 0, (0, 1)): 5.0}


def test_symmetrize_passes_low_p_through(toy_k3):
    ct, basis, sc = toy_k3
    s = compute_S(basis, sc, 3, 9, 2)
    T = symmetrize_to_T(s).entries
    for key, v in s.entries.items():
        if key[1] <= 1:
            assert T[key] == v


def test_symmetrized_polynomial_matches_unsymmetrized(toy_k3, rng):
    _, basis, sc = toy_k3
    s = compute_S(basis, sc, 3, 9, 2)
    T = symmetrize_to_T(s).entries
    for _ in range(20):
        t = rng.uniform(0.05, 0.5)
        d = rng.uniform(-1, 1, 3)

        def poly(entries):
            out = np.zeros(basis.dim)
            for (k, p, mu, g), v in entries.items():
                out[mu] += v * t ** (k + sum(g)) * np.prod([d[x] for x in g])
            return out

        assert np.allclose(poly(s.entries), poly(T), atol=1e-13, rtol=0)


def test_keys_admissible_and_real(toy_k6):
    ct = toy_k6[0]
    ct.check_keys()
    vals = np.array(list(ct.entries.values()))
    assert np.all(np.isfinite(vals)) and np.all(np.abs(vals) > 1e-14)


def test_gamma_monotonicity():
    small = build_coefficients(Z, X, 3, 5, 2)[0].entries
    big = build_coefficients(Z, X, 3, 8, 2)[0].entries
    assert set(small) <= set(big)
    assert all(big[k] == v for k, v in small.items())


def test_order_three_matches_quadrature(toy_k3, rng):
    ct, basis, _ = toy_k3
    for _ in range(10):
        t = rng.uniform(0.05, 0.4)
        d = rng.uniform(-1, 1, 3)
        M = assemble(basis, eval_coeffs(ct, t, d)).operator
        ref = quadrature_oracle(Z, X, d, t, 3)
        assert np.linalg.norm(M - ref) <= 1e-7 * np.linalg.norm(ref)


def test_constant_control_cancellation(rng):
    for _ in range(3):
        A, B = random_hermitian(4, rng), random_hermitian(4, rng)
        ct, basis, _ = build_coefficients(A, B, 6, 6, 0)
        d0 = rng.uniform(-1, 1)
        M = assemble(basis, eval_coeffs(ct, 0.3, [d0])).operator
        assert np.linalg.norm(M - 0.3 * (A + d0 * B)) <= 1e-12


def test_compute_S_guards(toy_k3):
    _, basis, sc = toy_k3
    with pytest.raises(ValidationError):
        compute_S(basis, sc, 3, 2, 2)
    A, B = np.diag([1.0, 2, 3, 4]), np.ones((4, 4))
    shallow = generate_lie_algebra(A, B, 2)
    assert not shallow.closed
    with pytest.raises(ClosureError):
        compute_S(shallow, compute_structure_constants(shallow), 3, 3, 0)


def test_parallel_build_is_bit_identical(rng):
    A, B = random_hermitian(3, rng), random_hermitian(3, rng)
    c1, b1, _ = build_coefficients(A, B, 4, 7, 2, workers=1)
    c2, b2, _ = build_coefficients(A, B, 4, 7, 2, workers=3)
    assert serialize_artifact(c1, b1, A, B) == serialize_artifact(c2, b2, A, B)


def test_artifact_round_trip(tmp_path, toy_k3, rng):
    ct, basis, _ = toy_k3
    path = tmp_path / "toy.mpc"
    save_artifact(ct, basis, path, Z, X)
    ct2, basis2 = load_artifact(path)
    assert ct2.entries == ct.entries
    assert serialize_artifact(ct2, basis2, Z, X) == path.read_bytes()
    for _ in range(5):
        t, d = rng.uniform(0.1, 0.4), rng.uniform(-1, 1, 3)
        assert np.array_equal(eval_coeffs(ct, t, d), eval_coeffs(ct2, t, d))
    assert "k_M" in export_text(ct, basis)


def test_artifact_rejects_tampering(toy_k3):
    ct, basis, _ = toy_k3
    data = bytearray(serialize_artifact(ct, basis, Z, X))
    bad = bytearray(data)
    bad[-40] ^= 1
    with pytest.raises(ArtifactError):
        parse_artifact(bytes(bad))
    with pytest.raises(ArtifactError):
        parse_artifact(b"nope" + bytes(data[4:]))
    with pytest.raises(ArtifactError):
        parse_artifact(bytes(data[:-1]))


def test_artifact_rejects_digest_mismatch(toy_k3):
    import hashlib

    ct, basis, _ = toy_k3
    data = serialize_artifact(ct, basis, Z, X)[:-32]
    i = data.index(ct.model_digest)
    body = data[:i] + bytes(32) + data[i + 32:]
    with pytest.raises(ArtifactError, match="digest"):
        parse_artifact(body + hashlib.sha256(body).digest())
