import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from gprobust.gp import (GpBank, GpHyperparams, GpPrediction, GridSearchSpec,
                         IllConditionedGramError, ObservationWindow, PosteriorSnapshot,
                         SlidingWindowGP, bank_snapshot, information_gain_greedy, ingest, kernel,
                         kernel_matrix, load_window_csv, log_marginal_likelihood, predict,
                         rho_aggregate, rho_component, save_window_csv, tune_hyperparams)

from oracles import dense_posterior

HP = GpHyperparams()


def window_from(X, y, cap=20):
    w = ObservationWindow(capacity=cap)
    for a, b in zip(X, y):
        ingest(w, a, b)
    return w


def test_kernel_hand_values():
    assert kernel(HP, np.zeros(6), np.zeros(6)) == 1.0
    # one coordinate apart by the length scale 0.5 -> exp(-1/2)
    b = np.zeros(6)
    b[2] = 0.5
    assert kernel(HP, np.zeros(6), b) == pytest.approx(math.exp(-0.5), abs=1e-15)
    b[2] = math.sqrt(2) * 0.5
    assert kernel(HP, np.zeros(6), b) == pytest.approx(math.exp(-1.0), abs=1e-15)


def test_kernel_dimension_mismatch():
    with pytest.raises(ValueError):
        kernel(HP, np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        kernel(GpHyperparams(length_scales=[0.5, 0.5]), np.zeros(3), np.zeros(3))


def test_empty_window_gives_prior():
    pred = predict(HP, ObservationWindow(), np.zeros(6))
    assert (pred.mu, pred.sigma_sq) == (0.0, 1.0)


def test_single_point_closed_form():
    y, s2 = 0.7, 1e-6
    w = window_from([np.zeros(6)], [y])
    pred = predict(HP, w, np.zeros(6))
    assert pred.mu == pytest.approx(y / (1 + s2), abs=1e-12)
    assert pred.sigma_sq == pytest.approx(1 - 1 / (1 + s2), abs=1e-12)
    far = predict(HP, w, np.full(6, 50.0))
    assert far.mu == pytest.approx(0.0, abs=1e-12)
    assert far.sigma_sq == pytest.approx(1.0, abs=1e-12)


def test_predict_matches_dense_inverse_oracle():
    rng = np.random.default_rng(0)
    for n in range(1, 21):
        X = rng.uniform(-1, 1, size=(n, 6))
        y = rng.normal(size=n)
        x = rng.uniform(-1, 1, size=6)
        mu, var = dense_posterior(HP, X, y, x)
        pred = predict(HP, window_from(X, y), x)
        assert abs(pred.mu - mu) <= 1e-9
        assert abs(pred.sigma_sq - max(var, 0.0)) <= 1e-9


def test_window_evicts_oldest():
    w = ObservationWindow(capacity=3)
    for i in range(5):
        ingest(w, [float(i)], float(i))
    assert list(w.y) == [2.0, 3.0, 4.0]
    assert w.X[:, 0].tolist() == [2.0, 3.0, 4.0]


def test_duplicate_points_without_noise_do_not_crash_thanks_to_jitter():
    w = window_from([np.zeros(6)] * 20, np.zeros(20))
    assert predict(HP, w, np.zeros(6)).sigma_sq >= 0


def test_ill_conditioned_gram_is_reported():
    hp = GpHyperparams(sigma_eta_sq=1e12, length_scales=50.0, sigma_omega_sq=1e-16)
    X = np.random.default_rng(0).normal(size=(20, 6)) * 1e-3
    with pytest.raises(IllConditionedGramError):
        predict(hp, window_from(X, np.zeros(20)), np.zeros(6))


@pytest.mark.parametrize("mu,sigma,beta,expected", [
    (0.5, 1.0, 3.0, 3.5),
    (-2.0, 1.0, 3.0, 5.0),
    (0.0, 0.0, 3.0, 0.0),
])
def test_rho_component_examples(mu, sigma, beta, expected):
    assert rho_component(GpPrediction(mu, sigma**2), beta) == pytest.approx(expected)


def test_rho_aggregate_examples():
    assert rho_aggregate([3.0, 3.0]) == pytest.approx(3 * math.sqrt(2))
    assert rho_aggregate([3.0, 4.0]) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        rho_aggregate([1.0, -0.1])


@settings(max_examples=200, deadline=None)
@given(mu=st.floats(-10, 10), sigma=st.floats(0, 10), beta=st.floats(0, 5))
def test_rho_component_bounds_the_interval(mu, sigma, beta):
    r = rho_component(GpPrediction(mu, sigma**2), beta)
    assert r >= abs(mu) - 1e-12
    assert r == pytest.approx(abs(mu) + beta * sigma, rel=1e-12, abs=1e-12)


def test_log_marginal_likelihood_oracle():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(8, 6))
    y = rng.normal(size=8)
    K = kernel_matrix(HP, X, X) + HP.sigma_omega_sq * np.eye(8)
    sign, logdet = np.linalg.slogdet(K)
    expected = -0.5 * y @ np.linalg.solve(K, y) - 0.5 * logdet - 4 * math.log(2 * math.pi)
    assert log_marginal_likelihood(HP, window_from(X, y)) == pytest.approx(expected, rel=1e-10)
    with pytest.raises(ValueError):
        log_marginal_likelihood(HP, ObservationWindow())


def test_tuning_picks_the_generating_length_scale():
    rng = np.random.default_rng(2)
    X = rng.uniform(-2, 2, size=(20, 1))
    true = GpHyperparams(1.0, 0.8, 1e-4)
    K = kernel_matrix(true, X, X) + 1e-4 * np.eye(20)
    y = np.linalg.cholesky(K) @ rng.normal(size=20)
    spec = GridSearchSpec(sigma_eta_sq=[1.0], length_scale=[0.05, 0.8, 20.0], sigma_omega_sq=1e-4)
    assert float(tune_hyperparams(window_from(X, y), spec).length_scales[0]) == 0.8


def test_tuning_needs_enough_data():
    with pytest.raises(ValueError):
        tune_hyperparams(window_from(np.zeros((3, 1)), np.zeros(3)), GridSearchSpec.logspace())


def test_information_gain_single_point():
    # one point with unit prior variance and unit noise: 0.5 log(1 + 1)
    gain = information_gain_greedy(HP, np.zeros((1, 6)), 1, noise_bound_sq=1.0)
    assert gain == pytest.approx(0.5 * math.log(2))


def test_information_gain_is_monotone_in_budget():
    cands = np.random.default_rng(4).uniform(-1, 1, size=(30, 6))
    gains = [information_gain_greedy(HP, cands, b) for b in range(1, 8)]
    assert all(b >= a for a, b in zip(gains, gains[1:]))


def test_duplicate_candidate_adds_no_more_than_distinct_pair():
    pts = np.random.default_rng(5).uniform(-1, 1, size=(2, 6))
    dup = information_gain_greedy(HP, np.stack([pts[0], pts[0]]), 2)

    def gain(S):
        K = kernel_matrix(HP, S, S)
        return 0.5 * np.linalg.slogdet(np.eye(len(S)) + K)[1]

    best = max(gain(pts[list(c)]) for c in itertools.combinations(range(2), 2))
    assert dup <= best + 1e-12


def test_window_csv_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    w = window_from(rng.normal(size=(7, 6)), rng.normal(size=7))
    path = tmp_path / "w.csv"
    save_window_csv(w, path)
    back = load_window_csv(path, capacity=20)
    np.testing.assert_array_equal(back.X, w.X)
    np.testing.assert_array_equal(back.y, w.y)


def test_estimator_api():
    gp = SlidingWindowGP(length_scales=0.5, window_size=5)
    assert gp.get_params()["window_size"] == 5
    assert clone(gp).get_params() == gp.get_params()
    mu, std = gp.predict(np.zeros((2, 3)), return_std=True)
    np.testing.assert_array_equal(mu, 0.0)
    np.testing.assert_array_equal(std, 1.0)

    rng = np.random.default_rng(7)
    X, y = rng.normal(size=(12, 3)), rng.normal(size=12)
    gp.fit(X, y)
    assert len(gp.window_) == 5
    x = rng.normal(size=(1, 3))
    mu_ref, var_ref = dense_posterior(gp.hyperparams, X[-5:], y[-5:], x[0])
    m, s = gp.predict(x, return_std=True)
    assert m[0] == pytest.approx(mu_ref, abs=1e-9)
    assert s[0] ** 2 == pytest.approx(var_ref, abs=1e-9)

    inc = SlidingWindowGP(length_scales=0.5, window_size=5)
    for row, t in zip(X, y):
        inc.partial_fit(row[None, :], [t])
    np.testing.assert_allclose(inc.predict(x), gp.predict(x), atol=1e-12)
    with pytest.raises(ValueError):
        inc.partial_fit(np.zeros((1, 4)), [0.0])


def test_bank_and_snapshot_agree():
    rng = np.random.default_rng(8)
    bank = GpBank(2, HP, window_size=20, beta_sqrt=3.0)
    snaps, queries = [bank_snapshot(bank, 6, 20)], [rng.normal(size=6)]
    for _ in range(25):
        bank.ingest(rng.normal(size=6) * 0.4, rng.normal(size=2))
    x = rng.normal(size=6) * 0.4
    mu, sigma = bank.predict(x)
    for j in range(2):
        X = np.array(bank.models[j].window_.X)
        y = np.array(bank.models[j].window_.y)
        m_ref, v_ref = dense_posterior(HP, X, y, x)
        assert mu[j] == pytest.approx(m_ref, abs=1e-9)
        assert sigma[j] ** 2 == pytest.approx(v_ref, abs=1e-9)
    snap = bank_snapshot(bank, 6, 20)
    np.testing.assert_allclose(snap.predict(x)[0], mu, atol=1e-10)
    assert snap.rho(x) == pytest.approx(bank.rho(x), abs=1e-10)
    snaps.append(snap)
    queries.append(x)
    stacked = PosteriorSnapshot.stack(snaps)
    rho = stacked.rho(np.stack(queries))
    assert rho[0] == pytest.approx(3 * math.sqrt(2))
    assert rho[1] == pytest.approx(bank.rho(x), abs=1e-10)
