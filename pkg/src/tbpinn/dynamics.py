"""Newtonian equations of motion for the planar three-body problem.

Bodies live in the (x, z) plane. Every state vector in the package uses the
canonical ordering::

    [p1x, p1z, p2x, p2z, p3x, p3z, v1x, v1z, v2x, v2z, v3x, v3z]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import SingularityError

__all__ = [
    "Vec2",
    "SystemState",
    "PhysicsConfig",
    "EnergyReport",
    "ConservedQuantities",
    "PAIRS",
    "accelerations",
    "energies",
    "state_derivative",
    "conserved_quantities",
]

# Pair order is fixed so that force accumulation is bit-reproducible.
PAIRS = ((0, 1), (0, 2), (1, 2))


class Vec2(NamedTuple):
    x: float
    z: float


@dataclass(frozen=True)
class PhysicsConfig:
    masses: tuple[float, float, float] = (1.0, 1.0, 1.0)
    G: float = 1.0
    distance_floor: float = 1e-12

    def __post_init__(self):
        if len(self.masses) != 3 or any(not m > 0 for m in self.masses):
            raise ValueError(f"masses must be three positive numbers, got {self.masses}")
        if not self.G > 0:
            raise ValueError(f"G must be positive, got {self.G}")
        if not self.distance_floor >= 0:
            raise ValueError("distance_floor must be nonnegative")


@dataclass(frozen=True)
class SystemState:
    """Positions and velocities of the three bodies at time ``t``.

    ``pos`` and ``vel`` are ``(3, 2)`` float arrays (rows are bodies, columns
    are x and z). They are copied and made read-only on construction.
    """

    t: float
    pos: np.ndarray
    vel: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pos = np.array(self.pos, dtype=float).reshape(3, 2)
        vel = np.zeros((3, 2)) if self.vel is None else np.array(self.vel, dtype=float).reshape(3, 2)
        pos.setflags(write=False)
        vel.setflags(write=False)
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "vel", vel)
        if not (math.isfinite(self.t) and np.isfinite(pos).all() and np.isfinite(vel).all()):
            raise ValueError("SystemState components must be finite")

    @classmethod
    def from_vector(cls, t: float, y) -> "SystemState":
        y = np.asarray(y, dtype=float)
        if y.shape != (12,):
            raise ValueError(f"state vector must have 12 entries, got shape {y.shape}")
        return cls(t, y[:6], y[6:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.pos.ravel(), self.vel.ravel()])

    def __eq__(self, other):
        if not isinstance(other, SystemState):
            return NotImplemented
        return (
            self.t == other.t
            and np.array_equal(self.pos, other.pos)
            and np.array_equal(self.vel, other.vel)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class EnergyReport:
    kinetic: float
    potential: float
    total: float


@dataclass(frozen=True)
class ConservedQuantities:
    center_of_mass: Vec2
    momentum: Vec2
    angular_momentum: float


def _as_positions(pos) -> np.ndarray:
    p = np.asarray(pos, dtype=float)
    if p.shape != (3, 2):
        p = p.reshape(3, 2)
    return p


def accelerations(pos, cfg: PhysicsConfig = PhysicsConfig()) -> np.ndarray:
    """Gravitational acceleration of each body, shape ``(3, 2)``.

    Raises
    ------
    SingularityError
        If any pairwise distance is below ``cfg.distance_floor``.
    """
    p = _as_positions(pos)
    m = cfg.masses
    acc = np.zeros((3, 2))
    for i, j in PAIRS:
        dx = p[j, 0] - p[i, 0]
        dz = p[j, 1] - p[i, 1]
        r2 = dx * dx + dz * dz
        r = math.sqrt(r2)
        if r < cfg.distance_floor or r == 0.0:
            raise SingularityError(f"bodies {i + 1} and {j + 1} are {r:.3e} apart")
        inv3 = cfg.G / (r2 * r)
        acc[i, 0] += m[j] * inv3 * dx
        acc[i, 1] += m[j] * inv3 * dz
        acc[j, 0] -= m[i] * inv3 * dx
        acc[j, 1] -= m[i] * inv3 * dz
    return acc


def energies(state: SystemState, cfg: PhysicsConfig = PhysicsConfig()) -> EnergyReport:
    m = cfg.masses
    kinetic = 0.0
    for i in range(3):
        vx, vz = state.vel[i]
        kinetic += 0.5 * m[i] * (vx * vx + vz * vz)
    potential = 0.0
    for i, j in PAIRS:
        dx, dz = state.pos[j] - state.pos[i]
        r = math.sqrt(dx * dx + dz * dz)
        if r < cfg.distance_floor or r == 0.0:
            raise SingularityError(f"bodies {i + 1} and {j + 1} are {r:.3e} apart")
        potential -= cfg.G * m[i] * m[j] / r
    return EnergyReport(kinetic, potential, kinetic + potential)


def state_derivative(state: SystemState, cfg: PhysicsConfig = PhysicsConfig()) -> np.ndarray:
    """Time derivative of the canonical 12-vector: ``[v1, v2, v3, a1, a2, a3]``."""
    return np.concatenate([state.vel.ravel(), accelerations(state.pos, cfg).ravel()])


def conserved_quantities(state: SystemState, cfg: PhysicsConfig = PhysicsConfig()) -> ConservedQuantities:
    m = np.asarray(cfg.masses)
    com = (m[:, None] * state.pos).sum(axis=0) / m.sum()
    mom = (m[:, None] * state.vel).sum(axis=0)
    x, z = state.pos[:, 0], state.pos[:, 1]
    vx, vz = state.vel[:, 0], state.vel[:, 1]
    ang = float(np.sum(m * (x * vz - z * vx)))
    return ConservedQuantities(Vec2(float(com[0]), float(com[1])), Vec2(float(mom[0]), float(mom[1])), ang)
