"""Sliding-window Gaussian-process regression of the linearization error.

One scalar GP per joint learns ``eta_i(q, qd, a_q)`` from a window of the
``n`` most recent observations (oldest point evicted first). The mean and
standard deviation give a per-joint interval ``mu +/- beta_sqrt * sigma`` and
the Euclidean norm of the per-joint interval bounds is the ``rho`` fed to
the robust outer loop.
"""
from __future__ import annotations

import csv
import itertools
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_X_y

LOG_2PI = math.log(2.0 * math.pi)


class IllConditionedGramError(np.linalg.LinAlgError):
    """``K + sigma_omega^2 I`` could not be Cholesky-factorized."""


@dataclass
class GpHyperparams:
    """Squared-exponential kernel hyperparameters.

    ``length_scales`` is the diagonal of the length-scale matrix (one entry
    per input feature, or a scalar shared by all of them).
    """

    sigma_eta_sq: float = 1.0
    length_scales: np.ndarray | float = 0.5
    sigma_omega_sq: float = 1e-6

    def __post_init__(self):
        self.length_scales = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        if self.sigma_eta_sq <= 0 or self.sigma_omega_sq <= 0:
            raise ValueError("variances must be strictly positive")
        if np.any(self.length_scales <= 0):
            raise ValueError("length scales must be strictly positive")


@dataclass
class GpPrediction:
    mu: float
    sigma_sq: float

    @property
    def sigma(self) -> float:
        return math.sqrt(max(self.sigma_sq, 0.0))


@dataclass
class ObservationWindow:
    """FIFO buffer of at most ``capacity`` input/output pairs."""

    capacity: int = 20
    inputs: deque = field(default_factory=deque)
    outputs: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.inputs = deque(self.inputs, maxlen=self.capacity)
        self.outputs = deque(self.outputs, maxlen=self.capacity)
        if len(self.inputs) != len(self.outputs):
            raise ValueError("inputs and outputs differ in length")

    def __len__(self):
        return len(self.outputs)

    @property
    def X(self) -> np.ndarray:
        if not self.inputs:
            return np.empty((0, 0))
        return np.array(self.inputs, dtype=float)

    @property
    def y(self) -> np.ndarray:
        return np.array(self.outputs, dtype=float)


def ingest(window: ObservationWindow, a_aug, y) -> ObservationWindow:
    """Append one observation, evicting the oldest when full."""
    window.inputs.append(np.asarray(a_aug, dtype=float).ravel().copy())
    window.outputs.append(float(y))
    return window


def _check_dims(hp: GpHyperparams, d: int):
    if hp.length_scales.size not in (1, d):
        raise ValueError(
            f"input has {d} features but {hp.length_scales.size} length scales were given")


def kernel_matrix(hp: GpHyperparams, A, B) -> np.ndarray:
    """Squared-exponential covariance between the rows of ``A`` and ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    _check_dims(hp, A.shape[1])
    Z = (A[:, None, :] - B[None, :, :]) / hp.length_scales
    return hp.sigma_eta_sq * np.exp(-0.5 * np.einsum("ijk,ijk->ij", Z, Z))


def kernel(hp: GpHyperparams, a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    _check_dims(hp, a.size)
    z = (a - b) / hp.length_scales
    return float(hp.sigma_eta_sq * np.exp(-0.5 * z @ z))


def _factor(hp: GpHyperparams, X):
    K = kernel_matrix(hp, X, X)
    K[np.diag_indices_from(K)] += hp.sigma_omega_sq
    try:
        return cho_factor(K, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedGramError(
            "gram matrix is not positive definite; check the hyperparameters") from exc


def predict(hp: GpHyperparams, window: ObservationWindow, a_star) -> GpPrediction:
    """Posterior mean and variance at ``a_star`` (zero prior mean)."""
    a_star = np.asarray(a_star, dtype=float).ravel()
    if len(window) == 0:
        return GpPrediction(0.0, hp.sigma_eta_sq)
    X = window.X
    factor = _factor(hp, X)
    k_star = kernel_matrix(hp, a_star[None, :], X)[0]
    mu = float(k_star @ cho_solve(factor, window.y))
    var = hp.sigma_eta_sq - float(k_star @ cho_solve(factor, k_star))
    return GpPrediction(mu, max(var, 0.0))


def rho_component(pred: GpPrediction, beta_sqrt: float) -> float:
    """Upper bound on ``|eta_i|`` from the interval ``mu +/- beta_sqrt sigma``."""
    half = beta_sqrt * pred.sigma
    return max(abs(pred.mu - half), abs(pred.mu + half))


def rho_aggregate(components: Iterable[float]) -> float:
    c = np.asarray(list(components), dtype=float)
    if np.any(c < 0):
        raise ValueError("rho components must be nonnegative")
    return float(np.sqrt(np.sum(c**2)))


def log_marginal_likelihood(hp: GpHyperparams, window: ObservationWindow) -> float:
    if len(window) == 0:
        raise ValueError("log marginal likelihood needs at least one observation")
    y = window.y
    L, lower = _factor(hp, window.X)
    alpha = cho_solve((L, lower), y)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * y.size * LOG_2PI)


@dataclass
class GridSearchSpec:
    """Log-space grid over the prior variance and a shared length scale."""

    sigma_eta_sq: Sequence[float]
    length_scale: Sequence[float]
    sigma_omega_sq: float = 1e-6

    @classmethod
    def logspace(cls, var_range=(1e-2, 1e2), ls_range=(0.05, 5.0), num=9, sigma_omega_sq=1e-6):
        return cls(np.geomspace(*var_range, num).tolist(),
                   np.geomspace(*ls_range, num).tolist(), sigma_omega_sq)


def tune_hyperparams(window: ObservationWindow, search_spec: GridSearchSpec) -> GpHyperparams:
    """Grid argmax of the log marginal likelihood."""
    if len(search_spec.sigma_eta_sq) == 0 or len(search_spec.length_scale) == 0:
        raise ValueError("search grid is empty")
    if len(window) < 10:
        raise ValueError("tuning needs at least 10 observations")
    best, best_lml = None, -np.inf
    for s2, ls in itertools.product(search_spec.sigma_eta_sq, search_spec.length_scale):
        hp = GpHyperparams(s2, ls, search_spec.sigma_omega_sq)
        lml = log_marginal_likelihood(hp, window)
        if lml > best_lml:
            best, best_lml = hp, lml
    return best


def information_gain_greedy(hp: GpHyperparams, candidates, budget: int,
                            noise_bound_sq: float = 1.0) -> float:
    """Greedy estimate of the maximum information gain.

    Picks, ``budget`` times, the candidate with the largest posterior variance
    (repeats allowed) and accumulates ``0.5 log(1 + var / noise_bound_sq)``,
    which sums to ``0.5 log det(I + K_S / noise_bound_sq)`` for the chosen set.
    """
    C = np.atleast_2d(np.asarray(candidates, dtype=float))
    if C.shape[0] == 0:
        raise ValueError("no candidates")
    if budget < 1:
        raise ValueError("budget must be at least 1")
    K = kernel_matrix(hp, C, C)
    var = np.diag(K).copy()
    # posterior covariance columns, updated by rank-one downdates
    cov = K.copy()
    gain = 0.0
    for _ in range(budget):
        j = int(np.argmax(var))
        v = var[j]
        gain += 0.5 * math.log1p(v / noise_bound_sq)
        col = cov[:, j].copy()
        cov -= np.outer(col, col) / (v + noise_bound_sq)
        var = np.maximum(np.diag(cov), 0.0)
    return gain


def save_window_csv(window: ObservationWindow, path) -> None:
    X, y = window.X, window.y
    d = X.shape[1] if len(window) else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"a{j + 1}" for j in range(d)] + ["y"])
        for row, target in zip(X, y):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(target))])


def load_window_csv(path, capacity: int | None = None) -> ObservationWindow:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = [[float(v) for v in r] for r in rows[1:] if r]
    window = ObservationWindow(capacity=capacity or max(len(body), 1))
    for r in body:
        ingest(window, r[:-1], r[-1])
    return window


class SlidingWindowGP(RegressorMixin, BaseEstimator):
    """Scalar GP regressor over a sliding window of observations.

    ``fit`` keeps the last ``window_size`` rows of ``X, y``; ``partial_fit``
    appends rows and evicts the oldest ones. Before any data is seen the
    prior (zero mean, variance ``signal_variance``) is returned.

    Parameters
    ----------
    signal_variance : float
        Prior variance of the latent function.
    length_scales : float or array of shape (n_features,)
    noise_variance : float
        Observation-noise variance added to the gram diagonal.
    window_size : int
        Number of most recent observations kept.
    """

    def __init__(self, signal_variance=1.0, length_scales=0.5, noise_variance=1e-6,
                 window_size=20):
        self.signal_variance = signal_variance
        self.length_scales = length_scales
        self.noise_variance = noise_variance
        self.window_size = window_size

    @property
    def hyperparams(self) -> GpHyperparams:
        return GpHyperparams(self.signal_variance, self.length_scales, self.noise_variance)

    def _reset(self):
        self.window_ = ObservationWindow(capacity=int(self.window_size))
        self._factor = None
        self._alpha = None

    def _refresh(self):
        if len(self.window_) == 0:
            self._factor, self._alpha, self.X_train_ = None, None, None
            return
        hp = self.hyperparams
        self.X_train_ = self.window_.X
        self._factor = _factor(hp, self.X_train_)
        self._alpha = cho_solve(self._factor, self.window_.y)

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self._reset()
        self.n_features_in_ = X.shape[1]
        for row, target in zip(X[-self.window_size:], y[-self.window_size:]):
            ingest(self.window_, row, target)
        self._refresh()
        return self

    def partial_fit(self, X, y):
        X, y = check_X_y(np.atleast_2d(X), np.atleast_1d(y), y_numeric=True)
        if not hasattr(self, "window_"):
            self._reset()
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        for row, target in zip(X, y):
            ingest(self.window_, row, target)
        self._refresh()
        return self

    def predict(self, X, return_std=False):
        X = check_array(np.atleast_2d(X))
        hp = self.hyperparams
        if getattr(self, "_factor", None) is None:
            mu = np.zeros(X.shape[0])
            std = np.full(X.shape[0], math.sqrt(hp.sigma_eta_sq))
            return (mu, std) if return_std else mu
        Ks = kernel_matrix(hp, X, self.X_train_)
        mu = Ks @ self._alpha
        if not return_std:
            return mu
        v = cho_solve(self._factor, Ks.T)
        var = hp.sigma_eta_sq - np.einsum("ij,ji->i", Ks, v)
        return mu, np.sqrt(np.maximum(var, 0.0))

    def log_marginal_likelihood(self) -> float:
        return log_marginal_likelihood(self.hyperparams, self.window_)


class GpBank:
    """``N`` independent sliding-window GPs sharing one input vector.

    A lock serializes window updates against predictions so no prediction
    sees a half-updated bank.
    """

    def __init__(self, n_outputs: int, hyperparams: GpHyperparams | Sequence[GpHyperparams] | None = None,
                 window_size: int = 20, beta_sqrt: float | Sequence[float] = 3.0):
        if hyperparams is None:
            hyperparams = GpHyperparams()
        if isinstance(hyperparams, GpHyperparams):
            hyperparams = [hyperparams] * n_outputs
        if len(hyperparams) != n_outputs:
            raise ValueError("one hyperparameter set per output is required")
        self.models = [
            SlidingWindowGP(hp.sigma_eta_sq, hp.length_scales, hp.sigma_omega_sq, window_size)
            for hp in hyperparams
        ]
        self.beta_sqrt = np.broadcast_to(np.asarray(beta_sqrt, dtype=float), (n_outputs,)).copy()
        if np.any(self.beta_sqrt < 0):
            raise ValueError("beta_sqrt must be nonnegative")
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.models)

    def ingest(self, a_aug, y) -> None:
        a_aug = np.asarray(a_aug, dtype=float)[None, :]
        y = np.asarray(y, dtype=float).ravel()
        with self._lock:
            for gp, yi in zip(self.models, y):
                gp.partial_fit(a_aug, [yi])

    def predict(self, a_aug):
        """Per-output ``(mu, sigma)`` at a single input."""
        a_aug = np.asarray(a_aug, dtype=float)[None, :]
        with self._lock:
            out = [gp.predict(a_aug, return_std=True) for gp in self.models]
        mu = np.array([m[0] for m, _ in out])
        sigma = np.array([s[0] for _, s in out])
        return mu, sigma

    def rho(self, a_aug) -> float:
        mu, sigma = self.predict(a_aug)
        comps = [rho_component(GpPrediction(m, s**2), b)
                 for m, s, b in zip(mu, sigma, self.beta_sqrt)]
        return rho_aggregate(comps)


@dataclass
class PosteriorSnapshot:
    """Frozen posterior of a :class:`GpBank`, padded to a fixed window width.

    Padded slots carry zero weight, so snapshots of windows with different
    fill levels can be stacked along a leading axis and queried together.
    Shapes (without the optional leading stack axis): ``X (N, W, d)``,
    ``alpha (N, W)``, ``Linv (N, W, W)``, ``length_scales (N, d)``,
    ``sigma_eta_sq (N,)``, ``beta_sqrt (N,)``.
    """

    X: np.ndarray
    alpha: np.ndarray
    Linv: np.ndarray
    length_scales: np.ndarray
    sigma_eta_sq: np.ndarray
    beta_sqrt: np.ndarray

    @staticmethod
    def stack(snaps: Sequence["PosteriorSnapshot"]) -> "PosteriorSnapshot":
        return PosteriorSnapshot(*(np.stack([getattr(s, f) for s in snaps]) for f in
                                   ("X", "alpha", "Linv", "length_scales", "sigma_eta_sq",
                                    "beta_sqrt")))

    def predict(self, a_aug):
        """Per-output ``(mu, sigma)``; ``a_aug`` has shape ``(..., d)`` matching the stack."""
        a = np.asarray(a_aug, dtype=float)
        Z = (a[..., None, None, :] - self.X) / self.length_scales[..., None, :]
        k = self.sigma_eta_sq[..., None] * np.exp(-0.5 * np.einsum("...wd,...wd->...w", Z, Z))
        mu = np.einsum("...w,...w->...", k, self.alpha)
        v = np.einsum("...ij,...j->...i", self.Linv, k)
        var = self.sigma_eta_sq - np.einsum("...i,...i->...", v, v)
        return mu, np.sqrt(np.maximum(var, 0.0))

    def rho(self, a_aug):
        mu, sigma = self.predict(a_aug)
        half = self.beta_sqrt * sigma
        comps = np.maximum(np.abs(mu - half), np.abs(mu + half))
        return np.sqrt(np.sum(comps**2, axis=-1))


def bank_snapshot(bank: GpBank, dim: int, width: int | None = None) -> PosteriorSnapshot:
    """Snapshot of ``bank`` for inputs of dimension ``dim``, padded to ``width`` points."""
    n_out = len(bank)
    with bank._lock:
        n = len(bank.models[0].window_) if hasattr(bank.models[0], "window_") else 0
        W = max(width or n, n, 1)
        X = np.zeros((n_out, W, dim))
        alpha = np.zeros((n_out, W))
        Linv = np.zeros((n_out, W, W))
        ls = np.empty((n_out, dim))
        sf2 = np.empty(n_out)
        for j, gp in enumerate(bank.models):
            hp = gp.hyperparams
            _check_dims(hp, dim)
            ls[j] = np.broadcast_to(hp.length_scales, (dim,))
            sf2[j] = hp.sigma_eta_sq
            if n and gp._factor is not None:
                X[j, :n] = gp.X_train_
                alpha[j, :n] = gp._alpha
                c, lower = gp._factor
                L = np.tril(c) if lower else np.triu(c).T
                Linv[j, :n, :n] = solve_triangular(L, np.eye(n), lower=True)
    return PosteriorSnapshot(X, alpha, Linv, ls, sf2, bank.beta_sqrt.copy())
