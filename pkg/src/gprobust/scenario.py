"""Experiment descriptions and their dict/YAML round trip."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .control import ConfigurationError, OuterLoopGains, RobustConfig, build_error_system, lyapunov_pair
from .dynamics import ManipulatorParams
from .gp import GpHyperparams


class ConfigError(ValueError):
    """Invalid scenario configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class Variant(str, Enum):
    NOMINAL = "nominal"
    FIXED_ROBUST = "fixed-robust"
    LEARN_DELTA_U = "learn-delta-u"
    ROBUST_LEARNING = "robust-learning"


ALL_VARIANTS = tuple(Variant)


@dataclass
class TrajectorySpec:
    """Per-joint sinusoid: ``A (1 - cos wt)`` (raised-cosine) or ``A sin wt``."""

    amplitude: list = field(default_factory=lambda: [0.25, 0.25])
    frequency: list = field(default_factory=lambda: [2.0, 2.0])
    form: str = "raised-cosine"
    duration: float = 20.0

    def __post_init__(self):
        self.amplitude = [float(a) for a in np.atleast_1d(self.amplitude)]
        self.frequency = [float(w) for w in np.atleast_1d(self.frequency)]
        if self.form not in ("raised-cosine", "sine"):
            raise ConfigError("trajectory.form", f"unknown form {self.form!r}")
        if not self.duration > 0:
            raise ConfigError("trajectory.duration", "must be positive")

    def broadcast(self, dof: int):
        try:
            amp = np.broadcast_to(np.asarray(self.amplitude), (dof,)).copy()
            omega = np.broadcast_to(np.asarray(self.frequency), (dof,)).copy()
        except ValueError as exc:
            raise ConfigError("trajectory", f"expected {dof} joints") from exc
        return amp, omega


@dataclass
class UncertaintySpec:
    """Model mismatch injected into the loop.

    The estimated model uses masses ``(1 + mass_error_fraction) * m``; the
    plant additionally accelerates by ``c1 * qd + c2 * q * qd`` (entrywise).
    """

    mass_error_fraction: float = 0.2
    additive_c1: float = 0.0
    additive_c2: float = 0.0

    def __post_init__(self):
        if not self.mass_error_fraction > -1:
            raise ConfigError("uncertainty.mass_error_fraction", "must exceed -1")

    def additive(self, q, qd):
        return self.additive_c1 * qd + self.additive_c2 * q * qd


@dataclass
class GpConfig:
    sigma_eta_sq: float = 1.0
    length_scale: float = 0.5
    sigma_omega_sq: float = 1e-6
    window_size: int = 20
    beta_sqrt: float = 3.0

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError("gp.window_size", "must be at least 1")
        if self.beta_sqrt < 0:
            raise ConfigError("gp.beta_sqrt", "must be nonnegative")
        try:
            self.hyperparams
        except ValueError as exc:
            raise ConfigError("gp", str(exc)) from exc

    @property
    def hyperparams(self) -> GpHyperparams:
        return GpHyperparams(self.sigma_eta_sq, self.length_scale, self.sigma_omega_sq)


@dataclass
class Scenario:
    params: ManipulatorParams = field(default_factory=ManipulatorParams)
    uncertainty: UncertaintySpec = field(default_factory=UncertaintySpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    variant: Variant = Variant.ROBUST_LEARNING
    Kp: list = field(default_factory=lambda: [7.0, 7.0])
    Kd: list = field(default_factory=lambda: [2.0, 2.0])
    Q: list | None = field(default_factory=lambda: [2.0, 2.0, 2.0, 2.0])
    epsilon: float = 1e-3
    rho_bar: float = 1e6
    rho_fixed: float = 1000.0
    gp: GpConfig = field(default_factory=GpConfig)
    dt: float = 1e-3
    sample_interval: float = 0.1
    label_noise_std: float = 1e-3
    label_source: str = "integrator"
    gp_query: str = "per-sample"
    initial_error: list | None = None
    seed: int = 0

    dof = 2

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if not self.dt > 0:
            raise ConfigError("dt", "must be positive")
        if self.sample_interval < self.dt:
            raise ConfigError("sample_interval", "must be at least dt")
        ratio = self.sample_interval / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ConfigError("sample_interval", "must be an integer multiple of dt")
        if self.label_source not in ("integrator", "finite-difference"):
            raise ConfigError("label_source", f"unknown source {self.label_source!r}")
        if self.gp_query not in ("per-step", "per-sample"):
            raise ConfigError("gp_query", f"unknown mode {self.gp_query!r}")
        if self.label_noise_std < 0:
            raise ConfigError("label_noise_std", "must be nonnegative")
        if self.rho_fixed < 0:
            raise ConfigError("rho_fixed", "must be nonnegative")
        if self.initial_error is not None and len(self.initial_error) != 2 * self.dof:
            raise ConfigError("initial_error", f"expected {2 * self.dof} entries")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        self.seed = int(self.seed)
        try:
            self.robust_config
        except ConfigurationError as exc:
            raise ConfigError("epsilon" if "epsilon" in str(exc) else "rho_bar", str(exc)) from exc
        try:
            self.lyapunov
        except (ConfigurationError, ValueError) as exc:
            raise ConfigError("Kp", str(exc)) from exc

    @property
    def gains(self) -> OuterLoopGains:
        return OuterLoopGains(np.asarray(self.Kp, dtype=float), np.asarray(self.Kd, dtype=float), self.dof)

    @property
    def robust_config(self) -> RobustConfig:
        return RobustConfig(self.epsilon, self.rho_bar)

    @property
    def error_system(self):
        return build_error_system(self.gains)

    @property
    def lyapunov(self):
        A, _ = self.error_system
        Q = None if self.Q is None else np.diag(np.asarray(self.Q, dtype=float)) \
            if np.ndim(self.Q) == 1 else np.asarray(self.Q, dtype=float)
        return lyapunov_pair(A, Q)

    @property
    def estimated_params(self) -> ManipulatorParams:
        return self.params.scale_masses(1.0 + self.uncertainty.mass_error_fraction)

    @property
    def n_steps(self) -> int:
        return int(round(self.trajectory.duration / self.dt))

    @property
    def steps_per_sample(self) -> int:
        return int(round(self.sample_interval / self.dt))

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "params": self.params.to_dict(),
            "uncertainty": dataclasses.asdict(self.uncertainty),
            "trajectory": dataclasses.asdict(self.trajectory),
            "variant": self.variant.value,
            "Kp": _plain(self.Kp),
            "Kd": _plain(self.Kd),
            "Q": _plain(self.Q),
            "epsilon": self.epsilon,
            "rho_bar": self.rho_bar,
            "rho_fixed": self.rho_fixed,
            "gp": dataclasses.asdict(self.gp),
            "dt": self.dt,
            "sample_interval": self.sample_interval,
            "label_noise_std": self.label_noise_std,
            "label_source": self.label_source,
            "gp_query": self.gp_query,
            "initial_error": _plain(self.initial_error),
            "seed": self.seed,
        }
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "scenario must be a mapping")
        _reject_unknown(data, {f.name for f in dataclasses.fields(cls)}, "")
        kwargs = dict(data)
        nested = {
            "params": ManipulatorParams,
            "uncertainty": UncertaintySpec,
            "trajectory": TrajectorySpec,
            "gp": GpConfig,
        }
        for key, typ in nested.items():
            if key in kwargs:
                sub = kwargs[key]
                if not isinstance(sub, dict):
                    raise ConfigError(key, "expected a mapping")
                _reject_unknown(sub, {f.name for f in dataclasses.fields(typ)}, key + ".")
                try:
                    kwargs[key] = typ(**sub)
                except ConfigError:
                    raise
                except (TypeError, ValueError) as exc:
                    raise ConfigError(key, str(exc)) from exc
        if "variant" in kwargs:
            try:
                kwargs["variant"] = Variant(kwargs["variant"])
            except ValueError as exc:
                raise ConfigError(
                    "variant", f"must be one of {[v.value for v in Variant]}") from exc
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError("<root>", str(exc)) from exc


REQUIRED_FIELDS = ("params", "uncertainty", "trajectory", "variant", "Kp", "Kd", "dt",
                   "sample_interval", "seed")


def scenario_from_config(data: dict, *, strict: bool = True) -> Scenario:
    """Parse a config mapping; with ``strict`` the core fields must be present."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "scenario must be a mapping")
    if strict:
        for key in REQUIRED_FIELDS:
            if key not in data:
                raise ConfigError(key, "missing required field")
    return Scenario.from_dict(data)


def _reject_unknown(data: dict, allowed: set, prefix: str):
    for key in data:
        if key not in allowed:
            raise ConfigError(prefix + str(key), "unknown field")


def _plain(x):
    if x is None:
        return None
    return np.asarray(x, dtype=float).tolist()


def default_trajectory_battery(duration: float = 20.0) -> list[TrajectorySpec]:
    """Twelve raised-cosine references: 4 amplitudes x 3 frequencies."""
    return [
        TrajectorySpec([a, a], [w, w], "raised-cosine", duration)
        for a in (0.2, 0.4, 0.6, 0.8)
        for w in (0.5, 1.0, 2.0)
    ]
