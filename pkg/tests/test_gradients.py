import numpy as np
import pytest
from scipy.linalg import expm

from conftest import X, Z, commutator, random_hermitian
from magnuspoly.coeffs import CoeffTensor, build_coefficients
from magnuspoly.errors import ValidationError
from magnuspoly.evaluate import assemble, eval_coeffs
from magnuspoly.gradients import (
    build_grad_tensors,
    d_a_dd,
    d_a_dt,
    dexp_series_matrix,
    propagator_derivative,
    segment_jacobian,
)
from magnuspoly.lie import compute_structure_constants, generate_lie_algebra


def test_reindexing_examples():
    ct = CoeffTensor(2, 4, 1, 1, {(1, 0, 0, ()): 0.5, (2, 2, 0, (0, 1)): 2.0}, np.ones(1))
    gt = build_grad_tensors(ct)
    assert gt.Ttilde[(1, 0, 0, ())] == 0.5
    assert gt.Ttilde[(2, 2, 0, (0, 1))] == 3 * 2.0
    assert gt.D[(0, 2, 2, 0, (1,))] == 2.0
    assert gt.D[(1, 2, 2, 0, (0,))] == 2.0
    ct2 = CoeffTensor(2, 4, 1, 1, {(2, 2, 0, (1, 1)): 2.0}, np.ones(1))
    assert build_grad_tensors(ct2).D == {(1, 2, 2, 0, (1,)): 4.0}


@pytest.fixture(scope="module")
def random_model():
    rng = np.random.default_rng(3)
    A, B = random_hermitian(3, rng), random_hermitian(3, rng)
    ct, basis, sc = build_coefficients(A, B, 5, 9, 3)
    return ct, basis, sc, build_grad_tensors(ct), A, B


def test_zero_control_time_derivative(toy_k3):
    ct, basis, _ = toy_k3
    gt = build_grad_tensors(ct)
    assert np.allclose(d_a_dt(gt, ct, 0.3, [0.0]), basis.a_coeffs, atol=1e-15)


def test_linear_control_second_order_derivative(toy_k3):
    ct, basis, _ = toy_k3
    gt = build_grad_tensors(ct)
    t, d1 = 0.3, 0.8
    v = d_a_dt(gt, ct, t, [0.0, d1], k_max=2) - d_a_dt(gt, ct, t, [0.0, d1], k_max=1)
    expect = 3 * d1 * t ** 2 / 12 * 1j * commutator(Z, X)
    assert np.abs(basis.combine(v) - expect).max() < 1e-14


def test_coefficient_derivatives_vs_central_differences(random_model):
    ct, basis, sc, gt, _, _ = random_model
    rng = np.random.default_rng(11)
    h = 1e-5
    for _ in range(10):
        t = rng.uniform(0.1, 0.5)
        d = rng.uniform(-1, 1, 4)
        f = lambda tt, dd: eval_coeffs(ct, tt, dd).sum(0)  # noqa: E731
        num = (f(t + h, d) - f(t - h, d)) / (2 * h)
        ana = d_a_dt(gt, ct, t, d)
        assert np.abs(ana - num).max() / (1 + np.abs(ana).max()) <= 1e-6
        for alpha in range(4):
            e = np.zeros(4)
            e[alpha] = h
            num = (f(t, d + e) - f(t, d - e)) / (2 * h)
            ana = d_a_dd(gt, ct, t, d, alpha)
            assert np.abs(ana - num).max() / (1 + np.abs(ana).max()) <= 1e-6


def test_segment_jacobian_matches_single(random_model):
    ct, _, _, gt, _, _ = random_model
    ts = np.array([0.2, 0.4])
    ds = np.array([[0.1, 0.2, -0.3, 0.4], [0.5, -0.1, 0.0, 0.2]])
    J = segment_jacobian(gt, ct, ts, ds)
    for s in range(2):
        assert np.allclose(J[s, 0], d_a_dt(gt, ct, ts[s], ds[s]))
        for alpha in range(4):
            assert np.allclose(J[s, alpha + 1], d_a_dd(gt, ct, ts[s], ds[s], alpha))
    with pytest.raises(ValidationError):
        d_a_dd(gt, ct, 0.1, ds[0], 4)


def test_rebuilt_from_artifact_is_identical(tmp_path, random_model):
    from magnuspoly.coeffs import load_artifact, save_artifact

    ct, basis, _, gt, A, B = random_model
    save_artifact(ct, basis, tmp_path / "a.mpc", A, B)
    ct2, _ = load_artifact(tmp_path / "a.mpc")
    gt2 = build_grad_tensors(ct2)
    assert gt2.Ttilde == gt.Ttilde and gt2.D == gt.D


def test_commuting_derivative_is_exact():
    M = 0.7 * Z
    dM = 0.3 * Z
    U = expm(-1j * M)
    for k_D in (0, 1, 5):
        assert np.allclose(propagator_derivative(M, dM, k_D), -1j * U @ dM, atol=1e-15)


def test_small_angle_matches_finite_difference():
    basis = generate_lie_algebra(Z, X, 3)
    sc = compute_structure_constants(basis)
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = rng.normal(size=3)
        a *= 0.5 / np.linalg.norm(basis.combine(a), 2)
        da = rng.normal(size=3)
        M = assemble(basis, a)
        eps = 1e-6
        num = (expm(-1j * basis.combine(a + eps * da)) - expm(-1j * basis.combine(a - eps * da))) / (2 * eps)
        dU = propagator_derivative(M, da, 12, sc=sc)
        assert np.abs(dU - num).max() < 1e-7
        dense = propagator_derivative(M.operator, basis.combine(da), 12)
        assert np.abs(dU - dense).max() < 1e-12


def test_series_truncation_convergence():
    rng = np.random.default_rng(9)
    basis = generate_lie_algebra(Z, X, 3)
    sc = compute_structure_constants(basis)
    a0 = rng.normal(size=3)
    da = rng.normal(size=3)
    scales = np.array([0.02, 0.05, 0.1, 0.2])
    diffs = []
    for s in scales:
        M = assemble(basis, s * a0)
        diffs.append(np.linalg.norm(propagator_derivative(M, da, 0, sc=sc)
                                    - propagator_derivative(M, da, 6, sc=sc)))
    # the leading difference is -(1/2) ad_M(dM), linear in |M|
    assert np.polyfit(np.log(scales), np.log(diffs), 1)[0] == pytest.approx(1.0, abs=0.05)


def test_unitary_tangent(random_model):
    ct, basis, sc, _, _, _ = random_model
    rng = np.random.default_rng(1)
    M = assemble(basis, eval_coeffs(ct, 0.4, rng.uniform(-1, 1, 4)))
    dU = propagator_derivative(M, rng.normal(size=basis.dim), 5, sc=sc)
    K = M.unitary().conj().T @ dU
    assert np.abs(K + K.conj().T).max() <= 1e-8


def test_dexp_identity_at_zero():
    basis = generate_lie_algebra(Z, X, 3)
    sc = compute_structure_constants(basis)
    assert np.array_equal(dexp_series_matrix(sc, np.zeros(3), 4), np.eye(3))
    with pytest.raises(ValidationError):
        propagator_derivative(Z, Z, -1)
