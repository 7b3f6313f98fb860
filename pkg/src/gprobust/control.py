"""Inverse-dynamics inner loop and robust PD outer loop.

The inner loop cancels the estimated dynamics so the plant behaves like
``qdd = a_q + eta``. The outer loop commands

    a_q = qdd_d - Kp (q - q_d) - Kd (qd - qd_d) + r

where ``r`` is a dead-zone unit-vector term scaled by an upper bound ``rho``
on ``||eta||``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import LagrangianModel, as_model, inverse_dynamics

HURWITZ_TOL = 1e-9


class ConfigurationError(ValueError):
    """Controller parameters violate a structural requirement."""


class NoSolutionError(ValueError):
    """The Lyapunov equation has no positive definite solution."""


def _as_square(x, n=None, name="matrix"):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 and n is not None:
        return x * np.eye(n)
    if x.ndim == 1:
        return np.diag(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ConfigurationError(f"{name} must be square, got shape {x.shape}")
    return x


@dataclass
class OuterLoopGains:
    """PD gains ``Kp`` (1/s^2) and ``Kd`` (1/s).

    Scalars and vectors are promoted to (diagonal) matrices of size ``dof``.
    """

    Kp: np.ndarray
    Kd: np.ndarray
    dof: int = 2

    def __post_init__(self):
        self.Kp = _as_square(self.Kp, self.dof, "Kp")
        self.Kd = _as_square(self.Kd, self.dof, "Kd")
        if self.Kp.shape != self.Kd.shape:
            raise ConfigurationError("Kp and Kd must have the same shape")
        self.dof = self.Kp.shape[0]


@dataclass
class RobustConfig:
    epsilon: float = 1e-3
    rho_bar: float = 1e6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if not self.rho_bar > 0:
            raise ConfigurationError("rho_bar must be positive")


@dataclass
class LyapunovPair:
    Q: np.ndarray
    P: np.ndarray


def is_hurwitz(A, tol=HURWITZ_TOL) -> bool:
    return bool(np.all(np.linalg.eigvals(A).real < -tol))


def build_error_system(gains: OuterLoopGains, check: bool = True):
    """Return ``(A, B)`` of the tracking-error dynamics ``de = A e + B (r + eta)``.

    Raises :class:`ConfigurationError` when ``A`` is not Hurwitz and ``check`` is set.
    """
    n = gains.dof
    A = np.block([[np.zeros((n, n)), np.eye(n)], [-gains.Kp, -gains.Kd]])
    B = np.vstack([np.zeros((n, n)), np.eye(n)])
    if check and not is_hurwitz(A):
        raise ConfigurationError(
            "Kp/Kd give a non-Hurwitz error system; eigenvalues "
            f"{np.round(np.linalg.eigvals(A), 6).tolist()}"
        )
    return A, B


def solve_lyapunov(A, Q) -> np.ndarray:
    """Solve ``A^T P + P A = -Q`` for ``P``.

    The equation is vectorized as ``(I kron A^T + A^T kron I) vec(P) = -vec(Q)``
    (column-major ``vec``), which is fine for the small systems handled here.
    The result is symmetrized to remove roundoff asymmetry.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise ValueError("A and Q must be square and of equal size")
    if not is_hurwitz(A):
        raise NoSolutionError("A is not Hurwitz; no positive definite solution")
    eye = np.eye(n)
    L = np.kron(eye, A.T) + np.kron(A.T, eye)
    vec_p = np.linalg.solve(L, -Q.reshape(-1, order="F"))
    P = vec_p.reshape(n, n, order="F")
    return 0.5 * (P + P.T)


def lyapunov_pair(A, Q=None) -> LyapunovPair:
    Q = np.eye(A.shape[0]) if Q is None else np.asarray(Q, dtype=float)
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() <= 0:
        raise ConfigurationError("Q must be positive definite")
    return LyapunovPair(Q=Q, P=solve_lyapunov(A, Q))


def robust_term(P_or_BtP, e, rho, epsilon, B=None) -> np.ndarray:
    """Dead-zone robustness vector.

    With ``w = B^T P e``: ``r = -rho w/||w||`` if ``||w|| > epsilon`` and
    ``r = -rho w/epsilon`` otherwise. ``w = 0`` lands in the second branch and
    gives ``r = 0``.

    The first argument is either ``P`` (``2N x 2N``, then ``B`` defaults to
    ``[0; I]``) or the precomputed ``B^T P`` (``N x 2N``). ``e``, ``rho`` and
    ``epsilon`` broadcast over leading batch dimensions.
    """
    M = np.asarray(P_or_BtP, dtype=float)
    if M.shape[-2] == M.shape[-1]:
        n = M.shape[-1] // 2
        BtP = M[..., n:, :] if B is None else np.asarray(B).T @ M
    else:
        BtP = M
    w = np.einsum("...ij,...j->...i", BtP, np.asarray(e, dtype=float))
    wnorm = np.linalg.norm(w, axis=-1)
    denom = np.maximum(wnorm, epsilon)
    return -(np.asarray(rho, dtype=float) / denom)[..., None] * w


def saturate_rho(rho_gp, rho_bar):
    return np.minimum(rho_gp, rho_bar)


def outer_loop(qdd_d, e, gains: OuterLoopGains, r=None) -> np.ndarray:
    """Commanded acceleration ``qdd_d - Kp e_pos - Kd e_vel + r``."""
    e = np.asarray(e, dtype=float)
    n = gains.dof
    a_q = (np.asarray(qdd_d, dtype=float)
           - e[..., :n] @ gains.Kp.T
           - e[..., n:] @ gains.Kd.T)
    if r is not None:
        a_q = a_q + r
    return a_q


def inner_loop(model_hat: LagrangianModel, q, qd, a_q) -> np.ndarray:
    """Torque from the estimated model: ``C_hat qd + g_hat + M_hat a_q``."""
    return inverse_dynamics(as_model(model_hat), q, qd, a_q)


def ultimate_radius(epsilon, rho_bar, Q) -> float:
    """Radius outside which ``e^T P e`` strictly decreases."""
    lam = np.linalg.eigvalsh(np.asarray(Q, dtype=float)).min()
    return float(np.sqrt(epsilon * rho_bar / (2.0 * lam)))


@dataclass
class EpsilonDiagnostic:
    delta: float
    ok: bool
    level: float = field(default=np.nan)


def check_epsilon(config: RobustConfig | None, Q, P, e0, *, epsilon=None, rho_bar=None):
    """Check that the ultimate ball fits strictly inside the initial level set.

    ``delta = sqrt(epsilon rho_bar / (2 lambda_min(Q)))``; ``ok`` is true when
    ``delta^2 lambda_max(P) < e0^T P e0``. ``epsilon``/``rho_bar`` keyword
    arguments override ``config`` (which cannot hold ``epsilon = 0``).
    """
    eps = config.epsilon if epsilon is None else epsilon
    rb = config.rho_bar if rho_bar is None else rho_bar
    P = np.asarray(P, dtype=float)
    e0 = np.asarray(e0, dtype=float)
    delta = ultimate_radius(eps, rb, Q)
    level = float(e0 @ P @ e0)
    ok = delta**2 * np.linalg.eigvalsh(P).max() < level
    return EpsilonDiagnostic(delta=delta, ok=bool(ok), level=level)
