"""Closed-loop simulation of the manipulator under the four controllers.

The plant is integrated with fixed-step RK4; the controller output is held
over each step. GPs are sampled every ``sample_interval`` seconds and their
outputs (``rho`` for the robust-learning controller, the torque correction
for the learn-delta-u controller) are held between samples.

:func:`run_batch` advances many scenarios together as stacked arrays; this
is what keeps a 144-run benchmark inside a couple of minutes on one core.
Rows never interact, so a scenario produces the same series alone or in a
batch.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .control import robust_term
from .dynamics import ManipulatorParams, TwoLinkArm, forward_dynamics, inverse_dynamics
from .gp import GpBank, PosteriorSnapshot, bank_snapshot
from .scenario import Scenario, TrajectorySpec, Variant

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3
STEADY_STATE_FRACTION = 0.2


class DivergenceError(RuntimeError):
    """The tracking error left the divergence guard."""


def desired_trajectory(spec: TrajectorySpec, t, dof: int = 2):
    """Reference position, velocity and acceleration at time ``t``."""
    amp, omega = spec.broadcast(dof)
    t = np.asarray(t, dtype=float)[..., None]
    wt = omega * t
    if spec.form == "raised-cosine":
        return amp * (1 - np.cos(wt)), amp * omega * np.sin(wt), amp * omega**2 * np.cos(wt)
    return amp * np.sin(wt), amp * omega * np.cos(wt), -amp * omega**2 * np.sin(wt)


def true_eta(scenario: Scenario, q, qd, a_q) -> np.ndarray:
    """Acceleration gap left by inverse dynamics with the estimated model.

    ``M^-1 (M~ a_q + C~ qd + g~)`` plus the additive unstructured term.
    """
    plant = TwoLinkArm(scenario.params)
    model_hat = TwoLinkArm(scenario.estimated_params)
    M = plant.mass_matrix(q)
    tau_gap = inverse_dynamics(model_hat, q, qd, a_q) - inverse_dynamics(plant, q, qd, a_q)
    parametric = np.linalg.solve(M, tau_gap[..., None])[..., 0]
    return parametric + scenario.uncertainty.additive(np.asarray(q), np.asarray(qd))


def gp_label(q, qd, a_q_held, qdd_measured, noise_std, rng):
    """Training pair for the uncertainty GPs: ``((q, qd, a_q), qdd - a_q + noise)``."""
    a_aug = np.concatenate([q, qd, a_q_held])
    noise = rng.normal(0.0, 1.0, size=np.shape(a_q_held)) * noise_std
    return a_aug, np.asarray(qdd_measured) - np.asarray(a_q_held) + noise


def rk4_step(accel, q, qd, dt, qdd0=None):
    """One classical Runge-Kutta step of ``(q, qd)' = (qd, accel(q, qd))``."""
    k1v = accel(q, qd) if qdd0 is None else qdd0
    k1q = qd
    k2q = qd + 0.5 * dt * k1v
    k2v = accel(q + 0.5 * dt * k1q, k2q)
    k3q = qd + 0.5 * dt * k2v
    k3v = accel(q + 0.5 * dt * k2q, k3q)
    k4q = qd + dt * k3v
    k4v = accel(q + dt * k3q, k4q)
    q_next = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    qd_next = qd + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return q_next, qd_next


def step(model, q, qd, u, dt, extra_accel=None):
    """Advance the plant one step under constant torque ``u``.

    Raises :class:`DivergenceError` if the new state is not finite.
    """
    def accel(qq, vv):
        a = forward_dynamics(model, qq, vv, u)
        return a if extra_accel is None else a + extra_accel(qq, vv)

    with np.errstate(invalid="ignore", over="ignore"):
        q_next, qd_next = rk4_step(accel, np.asarray(q, float), np.asarray(qd, float), dt)
    if not (np.all(np.isfinite(q_next)) and np.all(np.isfinite(qd_next))):
        raise DivergenceError("non-finite state after integration step")
    return q_next, qd_next


def rms(e_pos) -> tuple[np.ndarray, float]:
    """Per-joint RMS and aggregate ``sqrt(mean ||e||^2 / N)`` of a position-error series."""
    e_pos = np.asarray(e_pos, dtype=float)
    if e_pos.ndim == 1:
        e_pos = e_pos[:, None]
    if e_pos.shape[0] == 0:
        raise ValueError("cannot take the RMS of an empty series")
    per_joint = np.sqrt(np.mean(e_pos**2, axis=0))
    aggregate = float(np.sqrt(np.mean(np.sum(e_pos**2, axis=1) / e_pos.shape[1])))
    return per_joint, aggregate


_NUM = {"type": ["number", "null"]}
SUMMARY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["scenario_hash", "seed", "variant", "mass_error_fraction", "n_samples",
                 "diverged", "rms_per_joint", "rms_aggregate", "rms_steady_state",
                 "max_e_norm", "rho_coverage_steady_state"],
    "properties": {
        "scenario_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "seed": {"type": "integer", "minimum": 0},
        "variant": {"enum": ["nominal", "fixed-robust", "learn-delta-u", "robust-learning"]},
        "mass_error_fraction": {"type": "number"},
        "n_samples": {"type": "integer", "minimum": 0},
        "diverged": {"type": "boolean"},
        "rms_per_joint": {"type": "array", "items": _NUM},
        "rms_aggregate": _NUM,
        "rms_steady_state": _NUM,
        "max_e_norm": _NUM,
        "rho_coverage_steady_state": _NUM,
    },
    "additionalProperties": False,
}

CSV_SERIES = ("q", "q_d", "qdot", "a_q", "u", "eta")
CSV_PREFIX = {"q": "q", "q_d": "qd", "qdot": "qdot", "a_q": "aq", "u": "u", "eta": "eta"}


@dataclass
class SimResult:
    scenario: Scenario
    t: np.ndarray
    q: np.ndarray
    q_d: np.ndarray
    qdot: np.ndarray
    a_q: np.ndarray
    u: np.ndarray
    eta: np.ndarray
    rho: np.ndarray
    e_norm: np.ndarray
    diverged: bool = False
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.metrics:
            self.metrics = self.compute_metrics()

    @property
    def e_pos(self) -> np.ndarray:
        return self.q - self.q_d

    def steady_state_slice(self) -> slice:
        n = self.scenario.n_steps
        start = int(round((1 - STEADY_STATE_FRACTION) * n))
        return slice(start, len(self.t))

    def compute_metrics(self) -> dict:
        if len(self.t) == 0:
            return {"rms_per_joint": [], "rms_aggregate": float("nan"),
                    "rms_steady_state": float("nan"), "max_e_norm": float("nan"),
                    "rho_coverage_steady_state": float("nan")}
        per_joint, agg = rms(self.e_pos)
        ss = self.steady_state_slice()
        if self.diverged or ss.start >= len(self.t):
            ss_rms, coverage = float("nan"), float("nan")
        else:
            _, ss_rms = rms(self.e_pos[ss])
            coverage = float("nan")
            if self.scenario.variant in (Variant.ROBUST_LEARNING, Variant.FIXED_ROBUST):
                coverage = float(np.mean(self.rho[ss] >= np.linalg.norm(self.eta[ss], axis=1)))
        return {
            "rms_per_joint": per_joint.tolist(),
            "rms_aggregate": agg,
            "rms_steady_state": ss_rms,
            "max_e_norm": float(np.max(self.e_norm)),
            "rho_coverage_steady_state": coverage,
        }

    def summary(self) -> dict:
        """JSON-ready summary; undefined metrics are ``None``."""
        metrics = {k: _json_safe(v) for k, v in self.metrics.items()}
        return {
            "scenario_hash": self.scenario.hash(),
            "seed": self.scenario.seed,
            "variant": self.scenario.variant.value,
            "mass_error_fraction": self.scenario.uncertainty.mass_error_fraction,
            "n_samples": int(len(self.t)),
            "diverged": bool(self.diverged),
            **metrics,
        }

    def csv_header(self) -> list[str]:
        n = self.q.shape[1]
        cols = ["t"]
        for name in CSV_SERIES:
            cols += [f"{CSV_PREFIX[name]}{j + 1}" for j in range(n)]
        return cols + ["rho", "e_norm"]

    def table(self) -> np.ndarray:
        return np.column_stack([self.t] + [getattr(self, s) for s in CSV_SERIES]
                               + [self.rho, self.e_norm])

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(self.csv_header())
        for row in self.table():
            writer.writerow([repr(float(v)) for v in row])

    def write_summary(self, fh) -> None:
        json.dump(self.summary(), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _json_safe(v):
    if isinstance(v, list):
        return [_json_safe(x) for x in v]
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def read_csv_series(path) -> dict[str, np.ndarray]:
    """Load a time-series CSV back into named columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=float)
    data = data.reshape(-1, len(header))
    return {name: data[:, j] for j, name in enumerate(header)}


def _ingest_labels(rows, learning_rows, active, prev, qd, noise, fd_labels, dt):
    """Feed each learning row the label measured over the step just taken."""
    for i in learning_rows:
        if not active[i]:
            continue
        p_q, p_qd, p_aq, p_apd, p_du, p_qdd = (x[i] for x in prev)
        qdd_meas = (qd[i] - p_qd) / dt if fd_labels[i] else p_qdd
        if rows[i].variant is Variant.ROBUST_LEARNING:
            a_aug = np.concatenate([p_q, p_qd, p_aq])
            y = qdd_meas - p_aq + noise[i]
        else:
            # torque the plant needed for a_pd, minus what the nominal model supplied
            a_aug = np.concatenate([p_q, p_qd, p_apd])
            M = rows[i].plant.mass_matrix(p_q)
            y = p_du + M @ (p_apd - qdd_meas) + noise[i]
        rows[i].bank.ingest(a_aug, y)


def run(scenario: Scenario) -> SimResult:
    """Simulate one scenario over its full horizon."""
    return run_batch([scenario])[0]


def _check_batch(scenarios):
    first = scenarios[0]
    for s in scenarios[1:]:
        if (s.dt, s.sample_interval, s.n_steps, s.dof) != (
                first.dt, first.sample_interval, first.n_steps, first.dof):
            raise ValueError("scenarios in a batch must share dt, sample_interval and horizon")


class _Row:
    """Per-scenario bookkeeping that does not vectorize (GPs, RNG)."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.variant = scenario.variant
        self.rng = np.random.default_rng(scenario.seed)
        self.bank = None
        if scenario.variant in (Variant.ROBUST_LEARNING, Variant.LEARN_DELTA_U):
            g = scenario.gp
            self.bank = GpBank(scenario.dof, g.hyperparams, g.window_size, g.beta_sqrt)
        self.plant = TwoLinkArm(scenario.params)


def run_batch(scenarios: list[Scenario]) -> list[SimResult]:
    """Simulate several scenarios that share timing, one row per scenario."""
    scenarios = list(scenarios)
    if not scenarios:
        return []
    _check_batch(scenarios)
    first = scenarios[0]
    B, N, dt = len(scenarios), first.dof, first.dt
    n_steps, m = first.n_steps, first.steps_per_sample
    rows = [_Row(s) for s in scenarios]

    plant = TwoLinkArm(ManipulatorParams.stack([s.params for s in scenarios]))
    model_hat = TwoLinkArm(ManipulatorParams.stack([s.estimated_params for s in scenarios]))
    Kp = np.stack([s.gains.Kp for s in scenarios])
    Kd = np.stack([s.gains.Kd for s in scenarios])
    BtP = np.stack([s.lyapunov.P[N:, :] for s in scenarios])
    eps = np.array([s.epsilon for s in scenarios])
    rho_bar = np.array([s.rho_bar for s in scenarios])
    c1 = np.array([s.uncertainty.additive_c1 for s in scenarios])[:, None]
    c2 = np.array([s.uncertainty.additive_c2 for s in scenarios])[:, None]
    noise_std = np.array([s.label_noise_std for s in scenarios])
    amp = np.stack([s.trajectory.broadcast(N)[0] for s in scenarios])
    omega = np.stack([s.trajectory.broadcast(N)[1] for s in scenarios])
    cosine = np.array([s.trajectory.form == "raised-cosine" for s in scenarios])[:, None]
    fd_labels = np.array([s.label_source == "finite-difference" for s in scenarios])

    variants = [s.variant for s in scenarios]
    fixed = np.array([v is Variant.FIXED_ROBUST for v in variants])
    rho_held = np.where(fixed, [s.rho_fixed for s in scenarios], 0.0)
    rho_held = np.minimum(rho_held, rho_bar)
    du_held = np.zeros((B, N))
    learning_rows = [i for i, r in enumerate(rows) if r.bank is not None]
    is_rl = np.array([v is Variant.ROBUST_LEARNING for v in variants])
    per_step = np.array([s.gp_query == "per-step" for s in scenarios])
    any_per_step = bool(per_step[learning_rows].any()) if learning_rows else False
    width = max([s.gp.window_size for s in scenarios])
    snap = None

    def reference(t):
        wt = omega * t
        c, s = np.cos(wt), np.sin(wt)
        pos = np.where(cosine, amp * (1 - c), amp * s)
        vel = np.where(cosine, amp * omega * s, amp * omega * c)
        acc = np.where(cosine, amp * omega**2 * c, -amp * omega**2 * s)
        return pos, vel, acc

    pos0, vel0, _ = reference(0.0)
    e0 = np.stack([np.zeros(2 * N) if s.initial_error is None else np.asarray(s.initial_error, float)
                   for s in scenarios])
    q, qd = pos0 + e0[:, :N], vel0 + e0[:, N:]

    series = {name: np.empty((B, n_steps, N)) for name in CSV_SERIES}
    rho_series = np.empty((B, n_steps))
    e_norm_series = np.empty((B, n_steps))
    active = np.ones(B, dtype=bool)
    stop = np.full(B, n_steps)

    prev = None  # (q, qd, a_q, a_pd, u_corr, qdd) at the previous step

    with np.errstate(all="ignore"):
        for k in range(n_steps):
            t = k * dt
            q_des, qd_des, qdd_des = reference(t)
            e = np.concatenate([q - q_des, qd - qd_des], axis=1)
            a_pd = (qdd_des - np.einsum("bij,bj->bi", Kp, e[:, :N])
                    - np.einsum("bij,bj->bi", Kd, e[:, N:]))

            sample_now = k % m == 0
            if sample_now:
                # every row draws label noise so variants sharing a seed share a stream
                noise = np.stack([r.rng.normal(0.0, 1.0, N) for r in rows]) * noise_std[:, None]
                if learning_rows:
                    if prev is not None:
                        _ingest_labels(rows, learning_rows, active, prev, qd, noise, fd_labels, dt)
                    snap = PosteriorSnapshot.stack(
                        [bank_snapshot(rows[i].bank, 3 * N, width) for i in learning_rows])
            if learning_rows and (sample_now or any_per_step):
                L = learning_rows
                # the command uses rho from the previous step, which breaks the
                # algebraic loop between rho and a_q
                r_prev = robust_term(BtP[L], e[L], rho_held[L], eps[L])
                query = np.where(is_rl[L, None], a_pd[L] + r_prev, a_pd[L])
                mu, sigma = snap.predict(np.concatenate([q[L], qd[L], query], axis=1))
                half = snap.beta_sqrt * sigma
                rho_new = np.minimum(np.sqrt(np.sum(np.maximum(
                    np.abs(mu - half), np.abs(mu + half))**2, axis=1)), rho_bar[L])
                update = active[L] & (per_step[L] | sample_now)
                upd_rl = np.asarray(L)[update & is_rl[L]]
                upd_du = np.asarray(L)[update & ~is_rl[L]]
                rho_held[upd_rl] = rho_new[update & is_rl[L]]
                du_held[upd_du] = mu[update & ~is_rl[L]]

            r = robust_term(BtP, e, rho_held, eps)
            a_q = a_pd + r
            u = inverse_dynamics(model_hat, q, qd, a_q) + du_held

            def accel(qq, vv):
                return forward_dynamics(plant, qq, vv, u) + c1 * vv + c2 * qq * vv

            qdd0 = accel(q, qd)
            e_norm = np.linalg.norm(e, axis=1)

            for name, val in (("q", q), ("q_d", q_des), ("qdot", qd), ("a_q", a_q),
                              ("u", u), ("eta", qdd0 - a_q)):
                series[name][:, k] = val
            rho_series[:, k] = rho_held
            e_norm_series[:, k] = e_norm

            bad = active & ~((e_norm <= DIVERGENCE_LIMIT) & np.all(np.isfinite(e), axis=1))
            if bad.any():
                for i in np.flatnonzero(bad):
                    log.warning("scenario %d diverged at t=%.3f s", i, t)
                stop[bad] = k + 1
                active &= ~bad
                if not active.any():
                    break

            prev = (q, qd, a_q, a_pd, du_held.copy(), qdd0)
            q_next, qd_next = rk4_step(accel, q, qd, dt, qdd0)
            q = np.where(active[:, None], q_next, q)
            qd = np.where(active[:, None], qd_next, qd)

    results = []
    times = np.arange(n_steps) * dt
    for i, s in enumerate(scenarios):
        n = stop[i]
        results.append(SimResult(
            scenario=s,
            t=times[:n].copy(),
            **{name: series[name][i, :n].copy() for name in CSV_SERIES},
            rho=rho_series[i, :n].copy(),
            e_norm=e_norm_series[i, :n].copy(),
            diverged=bool(n < n_steps),
        ))
    return results
