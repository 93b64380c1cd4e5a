import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from conftest import X, Z, commutator
from magnuspoly.errors import ValidationError
from magnuspoly.evaluate import (
    assemble,
    check_convergence,
    control_derivative,
    control_value,
    eval_coeffs,
    eval_coeffs_batch,
    propagate,
    truncation_error,
)
from magnuspoly.verify import ode_reference


def test_control_value_factorial_convention():
    d = [1.0, 2.0, 6.0, 12.0]
    t = 0.7
    assert control_value(d, t) == pytest.approx(1 + 2 * t + 3 * t ** 2 + 2 * t ** 3)
    assert control_derivative(d, t, 1) == pytest.approx(2 + 6 * t + 6 * t ** 2)


def test_zero_control(toy_k6):
    ct, basis, _ = toy_k6
    a = eval_coeffs(ct, 0.4, [0.0])
    assert np.allclose(a[0], 0.4 * basis.a_coeffs, atol=1e-15)
    assert np.abs(a[1:]).max() == 0.0


def test_constant_control_sums_to_generator(toy_k6):
    ct, basis, _ = toy_k6
    a = eval_coeffs(ct, 0.3, [0.7])
    assert np.abs(a.sum(0) - 0.3 * (basis.a_coeffs + 0.7 * basis.b_coeffs)).max() < 1e-12
    assert truncation_error(a[-1], basis.l1_norms) < 1e-12


def test_linear_control_second_order(toy_k3):
    ct, basis, _ = toy_k3
    t, d1 = 0.3, 0.8
    M2 = basis.combine(eval_coeffs(ct, t, [0.0, d1])[1])
    assert np.abs(M2 - d1 * t ** 3 / 12 * 1j * commutator(Z, X)).max() < 1e-14


def test_second_order_sign_against_ode(toy_k3):
    # flipping the sign of the order-2 slice must make the ODE mismatch much worse
    ct, basis, _ = toy_k3
    t, d = 0.3, [0.0, 1.0]
    psi = np.array([1.0, 0.0], complex)
    ref = ode_reference(Z, X, d, t, psi)
    a = eval_coeffs(ct, t, d)
    err3 = np.linalg.norm(propagate(assemble(basis, a), psi) - ref)
    flipped = a.copy()
    flipped[1] *= -1
    err_flip = np.linalg.norm(propagate(assemble(basis, flipped), psi) - ref)
    assert err3 < 0.01 * err_flip


def test_batch_matches_single(toy_k6, rng):
    ct = toy_k6[0]
    ts = rng.uniform(0.1, 0.5, 5)
    ds = rng.uniform(-1, 1, (5, 4))
    batch = eval_coeffs_batch(ct, ts, ds)
    for i in range(5):
        assert np.allclose(batch[i], eval_coeffs(ct, ts[i], ds[i]), atol=1e-15)


def test_propagate_examples(rng):
    psi = np.array([1.0, 0.0], complex)
    assert np.array_equal(propagate(np.zeros((2, 2)), psi), psi)
    assert np.allclose(propagate(np.pi / 2 * X, psi), [0, -1j], atol=1e-12)
    for _ in range(5):
        M = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
        M = M + M.conj().T
        v = rng.normal(size=5) + 1j * rng.normal(size=5)
        v /= np.linalg.norm(v)
        out = propagate(M, v)
        assert np.linalg.norm(out - expm(-1j * M) @ v) < 1e-11
        assert abs(np.linalg.norm(out) - 1) < 1e-12
    with pytest.raises(ValidationError):
        propagate(X, np.array([1.0, 1.0]))


def test_truncation_error_arithmetic(toy_k3):
    assert truncation_error([0.1], [2.0]) == pytest.approx(0.2)
    with pytest.raises(ValidationError):
        truncation_error([0.1, 0.2], [1.0])


def test_truncation_error_bounds_top_term(toy_k3, rng):
    from magnuspoly.verify import quadrature_oracle_terms

    ct, basis, _ = toy_k3
    for _ in range(5):
        t, d = rng.uniform(0.1, 0.4), rng.uniform(-1, 1, 3)
        eps = truncation_error(eval_coeffs(ct, t, d)[-1], basis.l1_norms)
        M3 = quadrature_oracle_terms(Z, X, d, t, 3)[-1]
        assert eps >= np.linalg.norm(M3, 2) * (1 - 1e-9)


def test_check_convergence():
    O = np.zeros((2, 2))
    b, ok = check_convergence(X, O, 3.0, [0.0])
    assert b == pytest.approx(3.0) and ok
    b, ok = check_convergence(X, O, 3.2, [0.0])
    assert b == pytest.approx(3.2) and not ok
    # ||Z + s X||_2 = sqrt(1 + s^2)
    t = 1.5
    exact = 0.5 * (t * np.sqrt(1 + t * t) + np.arcsinh(t))
    b, _ = check_convergence(Z, X, t, [0.0, 1.0])
    assert b == pytest.approx(exact, rel=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.6), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_unitarity_and_hermiticity(toy_k6, t, d):
    ct, basis, _ = toy_k6
    M = assemble(basis, eval_coeffs(ct, t, d))
    op = M.operator
    assert np.abs(op - op.conj().T).max() <= 1e-12
    U = M.unitary()
    assert np.linalg.norm(U.conj().T @ U - np.eye(2)) <= 1e-12
    assert np.array_equal(M.a, M.a_orders.sum(0))


def test_assemble_length_mismatch(toy_k3):
    with pytest.raises(ValidationError):
        assemble(toy_k3[1], np.zeros(5))


def test_composition_consistency(toy_k3):
    ct, basis, _ = toy_k3
    d = np.array([0.3, -0.8, 0.5])
    ts = np.array([0.05, 0.1, 0.2])
    errs = []
    for t in ts:
        one = assemble(basis, eval_coeffs(ct, t, d)).unitary()
        half = t / 2
        d2 = [float(control_derivative(d, half, g)) for g in range(3)]
        two = (assemble(basis, eval_coeffs(ct, half, d2)).unitary()
               @ assemble(basis, eval_coeffs(ct, half, d)).unitary())
        errs.append(np.linalg.norm(one - two))
    slope = np.polyfit(np.log(ts), np.log(errs), 1)[0]
    assert slope >= 3.5
