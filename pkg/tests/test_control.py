import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from gprobust.control import (ConfigurationError, NoSolutionError, OuterLoopGains, RobustConfig,
                              build_error_system, check_epsilon, inner_loop, is_hurwitz,
                              lyapunov_pair, outer_loop, robust_term, saturate_rho, solve_lyapunov,
                              ultimate_radius)
from gprobust.dynamics import ManipulatorParams, TwoLinkArm, forward_dynamics


def test_error_system_structure():
    A, B = build_error_system(OuterLoopGains(np.diag([7.0, 5.0]), np.diag([1.0, 2.0])))
    np.testing.assert_array_equal(A[:2, :2], 0)
    np.testing.assert_array_equal(A[:2, 2:], np.eye(2))
    np.testing.assert_array_equal(A[2:, :2], -np.diag([7.0, 5.0]))
    np.testing.assert_array_equal(A[2:, 2:], -np.diag([1.0, 2.0]))
    np.testing.assert_array_equal(B, np.vstack([np.zeros((2, 2)), np.eye(2)]))


def test_eigenvalues_of_lightly_damped_gains():
    A, _ = build_error_system(OuterLoopGains(7.0, 1.0, dof=1))
    ev = np.sort_complex(np.linalg.eigvals(A))
    expected = np.sort_complex(np.array([(-1 - 1j * math.sqrt(27)) / 2, (-1 + 1j * math.sqrt(27)) / 2]))
    np.testing.assert_allclose(ev, expected, atol=1e-12)


def test_critically_damped_gains():
    A, _ = build_error_system(OuterLoopGains(1.0, 2.0, dof=1))
    np.testing.assert_allclose(np.linalg.eigvals(A), [-1.0, -1.0], atol=1e-6)


def test_non_hurwitz_gains_rejected():
    with pytest.raises(ConfigurationError):
        build_error_system(OuterLoopGains(np.diag([7.0, -1.0]), np.eye(2)))
    with pytest.raises(ConfigurationError):
        build_error_system(OuterLoopGains(1.0, 0.0))


def test_lyapunov_matches_scipy():
    A, _ = build_error_system(OuterLoopGains([7.0, 4.0], [1.0, 3.0]))
    Q = np.diag([1.0, 2.0, 3.0, 4.0])
    P = solve_lyapunov(A, Q)
    # scipy solves A X + X A^H = Q, so pass A^T and -Q
    ref = scipy.linalg.solve_continuous_lyapunov(A.T, -Q)
    np.testing.assert_allclose(P, ref, atol=1e-10)
    assert np.linalg.norm(A.T @ P + P @ A + Q) <= 1e-9 * np.linalg.norm(Q)


def test_lyapunov_scalar_closed_form():
    # a p + p a = -q  ->  p = q / (2|a|)
    assert solve_lyapunov(np.array([[-2.0]]), np.array([[3.0]]))[0, 0] == pytest.approx(0.75)


def test_lyapunov_diagonal_gains_closed_form():
    kp, kd = 7.0, 1.0
    A, _ = build_error_system(OuterLoopGains(kp, kd, dof=1))
    P = solve_lyapunov(A, np.eye(2))
    p12 = 1 / (2 * kp)
    p22 = (1 + 2 * p12) / (2 * kd)
    p11 = kd * p12 + kp * p22
    np.testing.assert_allclose(P, [[p11, p12], [p12, p22]], atol=1e-12)


def test_lyapunov_rejects_unstable_matrix():
    with pytest.raises(NoSolutionError):
        solve_lyapunov(np.array([[0.0, 1.0], [1.0, 0.0]]), np.eye(2))
    with pytest.raises(ConfigurationError):
        lyapunov_pair(np.diag([-1.0, -2.0]), np.diag([1.0, -1.0]))


@settings(max_examples=50, deadline=None)
@given(kp=st.lists(st.floats(0.1, 50), min_size=2, max_size=2),
       kd=st.lists(st.floats(0.1, 20), min_size=2, max_size=2))
def test_lyapunov_solution_is_positive_definite(kp, kd):
    A, _ = build_error_system(OuterLoopGains(kp, kd))
    pair = lyapunov_pair(A)
    np.testing.assert_allclose(pair.P, pair.P.T)
    assert np.linalg.eigvalsh(pair.P).min() > 0
    assert np.linalg.norm(A.T @ pair.P + pair.P @ A + pair.Q) <= 1e-9 * np.linalg.norm(pair.Q) * max(
        1.0, np.linalg.norm(pair.P))


def _P():
    A, _ = build_error_system(OuterLoopGains(7.0, 1.0))
    return lyapunov_pair(A).P


def test_robust_term_branches():
    P = _P()
    BtP = P[2:, :]
    e = np.array([0.5, -0.2, 0.3, 0.1])
    w = BtP @ e
    r = robust_term(P, e, 2.0, 1e-3)
    np.testing.assert_allclose(r, -2.0 * w / np.linalg.norm(w))
    small = 1e-4 * e
    r_in = robust_term(P, small, 2.0, 1e-3)
    np.testing.assert_allclose(r_in, -2.0 * (BtP @ small) / 1e-3)
    np.testing.assert_array_equal(robust_term(P, np.zeros(4), 5.0, 1e-3), 0.0)


def test_robust_term_accepts_btp_and_batches():
    P = _P()
    e = np.random.default_rng(0).normal(size=(6, 4))
    rho = np.linspace(0.1, 3.0, 6)
    full = robust_term(P, e, rho, 1e-2)
    via_btp = robust_term(P[2:, :], e, rho, 1e-2)
    np.testing.assert_allclose(full, via_btp)
    for i in range(6):
        np.testing.assert_allclose(full[i], robust_term(P, e[i], rho[i], 1e-2))


def test_robust_term_continuous_at_boundary():
    P = _P()
    BtP = P[2:, :]
    e = np.array([0.3, 0.4, -0.2, 0.5])
    eps = float(np.linalg.norm(BtP @ e))
    inside = robust_term(P, e * (1 - 1e-12), 1.7, eps)
    outside = robust_term(P, e * (1 + 1e-12), 1.7, eps)
    assert np.linalg.norm(inside - outside) <= 1e-8


def test_saturation():
    assert saturate_rho(5.0, 2.0) == 2.0
    np.testing.assert_array_equal(saturate_rho(np.array([1.0, 3.0]), 2.0), [1.0, 2.0])


def test_outer_loop_is_affine():
    gains = OuterLoopGains([7.0, 7.0], [1.0, 1.0])
    qdd_d = np.array([0.1, -0.2])
    e1, e2 = np.array([0.1, 0.2, 0.3, 0.4]), np.array([-0.5, 0.1, 0.0, 2.0])
    r = np.array([0.3, -0.3])
    base = outer_loop(qdd_d, np.zeros(4), gains)
    lin = lambda e: outer_loop(qdd_d, e, gains) - base
    np.testing.assert_allclose(lin(e1 + 2 * e2), lin(e1) + 2 * lin(e2), atol=1e-14)
    np.testing.assert_allclose(outer_loop(qdd_d, e1, gains, r) - outer_loop(qdd_d, e1, gains), r)
    np.testing.assert_allclose(outer_loop(qdd_d, e1, gains), [0.1 - 0.7 - 0.3, -0.2 - 1.4 - 0.4])


def test_inner_loop_with_exact_model_realizes_command():
    p = ManipulatorParams()
    q, qd, a = np.array([0.2, -0.4]), np.array([1.0, 0.5]), np.array([0.3, -1.1])
    u = inner_loop(p, q, qd, a)
    np.testing.assert_allclose(forward_dynamics(TwoLinkArm(p), q, qd, u), a, atol=1e-12)


def test_check_epsilon_example():
    A, _ = build_error_system(OuterLoopGains(7.0, 1.0))
    pair = lyapunov_pair(A)
    diag = check_epsilon(RobustConfig(1e-3, 1.0), pair.Q, pair.P, np.array([0.1, 0.1, 0, 0]))
    # sqrt(1e-3 * 1 / (2 * 1))
    assert diag.delta == pytest.approx(math.sqrt(5e-4))
    assert diag.ok
    bad = check_epsilon(RobustConfig(1e-3, 1e6), pair.Q, pair.P, np.array([0.1, 0.1, 0, 0]))
    assert bad.delta == pytest.approx(math.sqrt(500.0))
    assert not bad.ok
    assert ultimate_radius(2e-3, 1.0, 2 * np.eye(4)) == pytest.approx(math.sqrt(5e-4))


def test_robust_config_validation():
    with pytest.raises(ConfigurationError):
        RobustConfig(epsilon=0.0)
    with pytest.raises(ConfigurationError):
        RobustConfig(rho_bar=-1.0)


def test_is_hurwitz():
    assert is_hurwitz(np.diag([-1.0, -0.1]))
    assert not is_hurwitz(np.diag([-1.0, 0.0]))
