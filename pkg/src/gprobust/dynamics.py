"""Rigid-body model of a two-link planar manipulator.

The plant obeys ``M(q) qdd + C(q, qd) qd + g(q) = u``. Every function here
broadcasts over leading batch dimensions: ``q`` may have shape ``(..., 2)``
and the fields of :class:`ManipulatorParams` may be scalars or arrays whose
shape matches the batch shape. The simulator relies on this to advance many
independent closed loops in one pass.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Protocol, Sequence

import numpy as np


class ModelDegenerateError(ArithmeticError):
    """Raised when the mass matrix cannot be inverted."""


@dataclass(frozen=True)
class ManipulatorParams:
    """Physical parameters of the two-link arm.

    ``I1``/``I2`` are rotational inertias about each link's center of mass,
    ``lc1``/``lc2`` the joint-to-COM distances and ``g0`` the gravitational
    acceleration acting in the plane of motion (set it to 0 for a horizontal
    arm).
    """

    m1: float = 1.0
    m2: float = 1.0
    I1: float = 1.0
    I2: float = 1.0
    l1: float = 2.0
    l2: float = 1.0
    lc1: float = 1.0
    lc2: float = 0.5
    g0: float = 9.81

    def __post_init__(self):
        for name in ("m1", "m2", "I1", "I2", "l1", "l2", "lc1", "lc2"):
            if not np.all(np.asarray(getattr(self, name)) > 0):
                raise ValueError(f"{name} must be strictly positive")
        if not (np.all(np.asarray(self.lc1) <= np.asarray(self.l1))
                and np.all(np.asarray(self.lc2) <= np.asarray(self.l2))):
            raise ValueError("center of mass must lie on the link (lc <= l)")
        if not np.all(np.asarray(self.g0) >= 0):
            raise ValueError("g0 must be nonnegative")

    @classmethod
    def with_com_fraction(cls, fraction: float = 0.5, **kwargs) -> "ManipulatorParams":
        """Build parameters with ``lc_i = fraction * l_i``."""
        l1 = kwargs.get("l1", cls.l1)
        l2 = kwargs.get("l2", cls.l2)
        return cls(lc1=fraction * l1, lc2=fraction * l2, **kwargs)

    def scale_masses(self, factor: float) -> "ManipulatorParams":
        """Copy with both link masses multiplied by ``factor``."""
        return replace(self, m1=self.m1 * factor, m2=self.m2 * factor)

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @staticmethod
    def stack(params: Sequence["ManipulatorParams"]) -> "ManipulatorParams":
        """Combine several parameter sets into one with array-valued fields."""
        return ManipulatorParams(**{
            f.name: np.array([getattr(p, f.name) for p in params], dtype=float)
            for f in fields(ManipulatorParams)
        })


class LagrangianModel(Protocol):
    """Anything that supplies ``M``, ``C`` and ``g`` for ``M qdd + C qd + g = u``."""

    dof: int

    def mass_matrix(self, q: np.ndarray) -> np.ndarray: ...

    def coriolis_matrix(self, q: np.ndarray, qd: np.ndarray) -> np.ndarray: ...

    def gravity_vector(self, q: np.ndarray) -> np.ndarray: ...


def _col(x):
    # params broadcast against the batch shape of q[..., i]
    return np.asarray(x, dtype=float)


def mass_matrix(p: ManipulatorParams, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    c2 = np.cos(q[..., 1])
    m1, m2, I1, I2 = _col(p.m1), _col(p.m2), _col(p.I1), _col(p.I2)
    l1, lc1, lc2 = _col(p.l1), _col(p.lc1), _col(p.lc2)
    m22 = m2 * lc2**2 + I2
    m12 = m2 * (lc2**2 + l1 * lc2 * c2) + I2
    m11 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2.0 * l1 * lc2 * c2) + I1 + I2
    m22 = np.broadcast_to(m22, m11.shape)
    return np.stack([np.stack([m11, m12], -1), np.stack([m12, m22], -1)], -2)


def coriolis_matrix(p: ManipulatorParams, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """Christoffel-symbol Coriolis matrix; ``dM/dt - 2C`` is skew-symmetric."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    h = -_col(p.m2) * _col(p.l1) * _col(p.lc2) * np.sin(q[..., 1])
    qd1, qd2 = qd[..., 0], qd[..., 1]
    c11 = h * qd2
    c12 = h * (qd1 + qd2)
    c21 = -h * qd1
    c22 = np.zeros_like(c11)
    return np.stack([np.stack([c11, c12], -1), np.stack([c21, c22], -1)], -2)


def gravity_vector(p: ManipulatorParams, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    g0 = _col(p.g0)
    c12 = np.cos(q[..., 0] + q[..., 1])
    g2 = _col(p.m2) * _col(p.lc2) * g0 * c12
    g1 = (_col(p.m1) * _col(p.lc1) + _col(p.m2) * _col(p.l1)) * g0 * np.cos(q[..., 0]) + g2
    return np.stack([g1, g2], -1)


class TwoLinkArm:
    """Two-link planar arm behind the :class:`LagrangianModel` interface."""

    dof = 2

    def __init__(self, params: ManipulatorParams | None = None):
        self.params = ManipulatorParams() if params is None else params

    def mass_matrix(self, q):
        return mass_matrix(self.params, q)

    def coriolis_matrix(self, q, qd):
        return coriolis_matrix(self.params, q, qd)

    def gravity_vector(self, q):
        return gravity_vector(self.params, q)

    def kinetic_energy(self, q, qd):
        qd = np.asarray(qd, dtype=float)
        return 0.5 * np.einsum("...i,...ij,...j->...", qd, self.mass_matrix(q), qd)

    def __repr__(self):
        return f"TwoLinkArm({self.params!r})"


def as_model(model) -> LagrangianModel:
    """Accept either a model or bare :class:`ManipulatorParams`."""
    if isinstance(model, ManipulatorParams):
        return TwoLinkArm(model)
    return model


def bias_forces(model: LagrangianModel, q, qd) -> np.ndarray:
    """``C(q, qd) qd + g(q)``."""
    model = as_model(model)
    qd = np.asarray(qd, dtype=float)
    return np.einsum("...ij,...j->...i", model.coriolis_matrix(q, qd), qd) + model.gravity_vector(q)


def inverse_dynamics(model: LagrangianModel, q, qd, qdd) -> np.ndarray:
    """Torque realizing ``qdd``: ``M qdd + C qd + g``."""
    model = as_model(model)
    qdd = np.asarray(qdd, dtype=float)
    return np.einsum("...ij,...j->...i", model.mass_matrix(q), qdd) + bias_forces(model, q, qd)


def forward_dynamics(model: LagrangianModel, q, qd, u) -> np.ndarray:
    """Joint accelerations ``M(q)^-1 (u - C qd - g)``."""
    model = as_model(model)
    rhs = np.asarray(u, dtype=float) - bias_forces(model, q, qd)
    try:
        qdd = np.linalg.solve(model.mass_matrix(q), rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise ModelDegenerateError("mass matrix is singular") from exc
    return qdd
