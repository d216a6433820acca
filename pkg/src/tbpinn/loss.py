"""Data loss, ODE-residual physics loss and physics-weight schedules.

The residual of a model ``u(t) = (p, v)`` is ``(dp/dt - v, dv/dt - a(p))``
where ``a`` is the gravitational acceleration at the *predicted* positions.
During training pair distances are softened as ``sqrt(d^2 + delta^2)`` so a
transient collision in the predictions cannot kill a run; metric mode uses
``delta = 0`` and reports collisions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dynamics import PAIRS, PhysicsConfig
from .errors import DimensionError, SingularityError
from .network import ParameterStore, batch_backward, batch_forward

__all__ = [
    "DEFAULT_SOFTENING",
    "ScheduleKind",
    "AlphaSchedule",
    "LossConfig",
    "LossBreakdown",
    "alpha_at",
    "data_loss_mae",
    "batch_accelerations",
    "physics_residual",
    "tape_physics_residual",
    "physics_loss",
    "total_loss",
    "loss_and_gradient",
    "physics_loss_and_gradient",
]

DEFAULT_SOFTENING = 1e-6


class ScheduleKind(enum.Enum):
    CONSTANT = "constant"
    WARMUP = "warmup"
    LINEAR = "linear"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class AlphaSchedule:
    kind: ScheduleKind = ScheduleKind.LINEAR
    alpha0: float = 0.001
    alpha_max: float = 0.75
    ramp_epochs: int = 200
    warmup_epochs: int = 0

    def __post_init__(self):
        if not isinstance(self.kind, ScheduleKind):
            object.__setattr__(self, "kind", ScheduleKind(str(self.kind).lower()))
        if self.alpha0 < 0 or self.alpha_max < 0:
            raise ValueError("alpha values must be nonnegative")
        if self.ramp_epochs < 1:
            raise ValueError("ramp_epochs must be at least 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")
        if self.kind in (ScheduleKind.LINEAR, ScheduleKind.EXPONENTIAL) and self.alpha0 > self.alpha_max:
            raise ValueError("alpha0 must not exceed alpha_max for ramping schedules")
        if self.kind is ScheduleKind.EXPONENTIAL and self.alpha0 == 0 and self.alpha_max > 0:
            raise ValueError("exponential ramp needs alpha0 > 0")

    @classmethod
    def off(cls) -> "AlphaSchedule":
        return cls(ScheduleKind.CONSTANT, 0.0, 0.0)


def alpha_at(schedule: AlphaSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    kind = schedule.kind
    if kind is ScheduleKind.CONSTANT:
        return schedule.alpha_max
    if kind is ScheduleKind.WARMUP:
        return 0.0 if epoch < schedule.warmup_epochs else schedule.alpha_max
    frac = min(1.0, epoch / schedule.ramp_epochs)
    if kind is ScheduleKind.LINEAR:
        return schedule.alpha0 + (schedule.alpha_max - schedule.alpha0) * frac
    if schedule.alpha0 == schedule.alpha_max:
        return schedule.alpha0
    # geometric interpolation between alpha0 and alpha_max
    return schedule.alpha0 * (schedule.alpha_max / schedule.alpha0) ** frac


@dataclass(frozen=True)
class LossConfig:
    schedule: AlphaSchedule = AlphaSchedule()
    residual_clamp: float | None = None
    softening: float = DEFAULT_SOFTENING
    # extra random collocation times per initial condition (0 = reuse the data inputs)
    extra_collocation: int = 0

    def __post_init__(self):
        if self.residual_clamp is not None and not self.residual_clamp > 0:
            raise ValueError("residual_clamp must be positive when set")
        if self.softening < 0:
            raise ValueError("softening must be nonnegative")
        if self.extra_collocation < 0:
            raise ValueError("extra_collocation must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    data_loss: float
    physics_loss: float
    alpha: float
    total: float


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 12 or pred.shape[0] == 0:
        raise DimensionError(f"need matching nonempty (B, 12) batches, got {pred.shape} and {target.shape}")
    return pred, target


def data_loss_mae(predictions, targets) -> float:
    """Mean absolute error over every element of the batch."""
    pred, target = _pair(predictions, targets)
    return float(np.mean(np.abs(pred - target)))


def batch_accelerations(positions: np.ndarray, cfg: PhysicsConfig = PhysicsConfig(), softening: float = 0.0):
    """Accelerations for a ``(B, 6)`` position batch.

    Returns ``(acc, singular)`` where ``singular`` flags rows whose closest
    pair is below the distance floor. Softening replaces ``r^2`` by
    ``r^2 + softening^2`` and disables the flag.
    """
    P = np.asarray(positions, dtype=np.float64)
    acc = np.zeros_like(P)
    singular = np.zeros(P.shape[0], dtype=bool)
    m = cfg.masses
    eps2 = softening * softening
    for i, j in PAIRS:
        d = P[:, 2 * j : 2 * j + 2] - P[:, 2 * i : 2 * i + 2]
        raw2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
        if softening == 0.0:
            singular |= ~(np.sqrt(raw2) >= cfg.distance_floor)
        r2 = raw2 + eps2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv3 = cfg.G / (r2 * np.sqrt(r2))
            f = inv3[:, None] * d
        acc[:, 2 * i : 2 * i + 2] += m[j] * f
        acc[:, 2 * j : 2 * j + 2] -= m[i] * f
    return acc, singular


def _acceleration_vjp(P: np.ndarray, g_acc: np.ndarray, cfg: PhysicsConfig, softening: float) -> np.ndarray:
    g_pos = np.zeros_like(P)
    m = cfg.masses
    eps2 = softening * softening
    for i, j in PAIRS:
        d = P[:, 2 * j : 2 * j + 2] - P[:, 2 * i : 2 * i + 2]
        r2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + eps2
        r = np.sqrt(r2)
        inv3 = cfg.G / (r2 * r)
        inv5 = 3.0 * cfg.G / (r2 * r2 * r)
        g_f = m[j] * g_acc[:, 2 * i : 2 * i + 2] - m[i] * g_acc[:, 2 * j : 2 * j + 2]
        proj = np.sum(d * g_f, axis=1)
        g_d = inv3[:, None] * g_f - (inv5 * proj)[:, None] * d
        g_pos[:, 2 * j : 2 * j + 2] += g_d
        g_pos[:, 2 * i : 2 * i + 2] -= g_d
    return g_pos


def physics_residual(outputs, tangents, cfg: PhysicsConfig = PhysicsConfig(), softening: float = 0.0) -> np.ndarray:
    """``(B, 12)`` residuals ``[dp/dt - v, dv/dt - a(p)]`` for a batch of model outputs.

    Raises :class:`SingularityError` when unsoftened predicted bodies collide.
    """
    Y = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    dY = np.atleast_2d(np.asarray(tangents, dtype=np.float64))
    if Y.shape != dY.shape or Y.shape[1] != 12:
        raise DimensionError("outputs and tangents must both be (B, 12)")
    acc, singular = batch_accelerations(Y[:, :6], cfg, softening)
    if singular.any():
        raise SingularityError(f"predicted bodies collide in {int(singular.sum())} row(s)")
    return np.concatenate([dY[:, :6] - Y[:, 6:], dY[:, 6:] - acc], axis=1)


def tape_physics_residual(outputs, tangents, cfg: PhysicsConfig = PhysicsConfig(), softening: float = 0.0) -> list:
    """Residual of one sample built from tape scalars (reference route)."""
    if len(outputs) != 12 or len(tangents) != 12:
        raise DimensionError("need 12 outputs and 12 tangents")
    pos = outputs[:6]
    acc: list = [0.0] * 6
    m = cfg.masses
    eps2 = softening * softening
    for i, j in PAIRS:
        dx = pos[2 * j] - pos[2 * i]
        dz = pos[2 * j + 1] - pos[2 * i + 1]
        r2 = dx * dx + dz * dz
        if softening == 0.0 and ad._val(r2) ** 0.5 < cfg.distance_floor:
            raise SingularityError(f"predicted bodies {i + 1} and {j + 1} collide")
        inv3 = cfg.G / ad.pow32(r2 + eps2)
        acc[2 * i] = acc[2 * i] + m[j] * inv3 * dx
        acc[2 * i + 1] = acc[2 * i + 1] + m[j] * inv3 * dz
        acc[2 * j] = acc[2 * j] - m[i] * inv3 * dx
        acc[2 * j + 1] = acc[2 * j + 1] - m[i] * inv3 * dz
    r_pos = [tangents[k] - outputs[6 + k] for k in range(6)]
    r_vel = [tangents[6 + k] - acc[k] for k in range(6)]
    return r_pos + r_vel


def _residual_adjoints(Y, R, scale, phys_cfg, softening):
    # adjoints of scale * sum(R**2) with respect to outputs and tangents
    g_R = scale * R
    g_Y = np.zeros_like(Y)
    g_Y[:, 6:] = -g_R[:, :6]
    g_Y[:, :6] = -_acceleration_vjp(Y[:, :6], g_R[:, 6:], phys_cfg, softening)
    return g_Y, g_R


def physics_loss_and_gradient(
    params: ParameterStore, X: np.ndarray, phys_cfg: PhysicsConfig = PhysicsConfig(), softening: float = DEFAULT_SOFTENING
):
    """Unclamped physics loss on inputs ``X`` and its flat parameter gradient."""
    res = batch_forward(params, X, params.config.time_index)
    Y, dY = res.outputs, res.tangents
    acc, _ = batch_accelerations(Y[:, :6], phys_cfg, softening)
    R = np.concatenate([dY[:, :6] - Y[:, 6:], dY[:, 6:] - acc], axis=1)
    g_Y, g_dY = _residual_adjoints(Y, R, 2.0 / R.size, phys_cfg, softening)
    return float(np.mean(R * R)), batch_backward(params, res, g_Y, g_dY)


def physics_loss(residuals, clamp: float | None = None) -> float:
    """Mean squared residual component, capped at ``clamp`` when given."""
    R = np.asarray(residuals, dtype=np.float64)
    if R.size == 0:
        raise DimensionError("physics loss needs at least one collocation point")
    value = float(np.mean(R * R))
    return min(value, clamp) if clamp is not None else value


def total_loss(data_loss: float, physics: float, alpha: float, clamp: float | None = None) -> LossBreakdown:
    capped = min(physics, clamp) if clamp is not None else physics
    return LossBreakdown(data_loss, physics, alpha, data_loss + alpha * capped)


def loss_and_gradient(
    params: ParameterStore,
    X: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    loss_cfg: LossConfig = LossConfig(),
    phys_cfg: PhysicsConfig = PhysicsConfig(),
    collocation: np.ndarray | None = None,
    *,
    need_gradient: bool = True,
    with_physics: bool = True,
):
    """Loss breakdown and flat parameter gradient for one batch.

    ``collocation`` defaults to ``X``. With ``alpha == 0`` the physics term is
    still evaluated for reporting but contributes nothing to the gradient,
    so the parameter path equals a run without it. ``with_physics=False``
    skips the physics evaluation altogether (reported as NaN).
    """
    targets = np.asarray(targets, dtype=np.float64)
    ti = params.config.time_index
    col = X if collocation is None else collocation
    shared = collocation is None and with_physics

    data_pass = batch_forward(params, X, ti if shared else None, keep=need_gradient)
    pred, target = _pair(data_pass.outputs, targets)
    diff = pred - target
    data_value = float(np.mean(np.abs(diff)))
    g_data = np.sign(diff) / diff.size
    if not with_physics:
        breakdown = LossBreakdown(data_value, float("nan"), 0.0, data_value)
        return breakdown, (batch_backward(params, data_pass, g_data) if need_gradient else None)

    phys_pass = data_pass if shared else batch_forward(params, col, ti, keep=need_gradient and alpha != 0)
    Y, dY = phys_pass.outputs, phys_pass.tangents
    acc, _ = batch_accelerations(Y[:, :6], phys_cfg, loss_cfg.softening)
    R = np.concatenate([dY[:, :6] - Y[:, 6:], dY[:, 6:] - acc], axis=1)
    phys_value = float(np.mean(R * R))
    breakdown = total_loss(data_value, phys_value, alpha, loss_cfg.residual_clamp)
    if not need_gradient:
        return breakdown, None

    physics_active = alpha != 0 and (loss_cfg.residual_clamp is None or phys_value < loss_cfg.residual_clamp)
    if not physics_active:
        return breakdown, batch_backward(params, data_pass, g_data)

    g_Y, g_dY = _residual_adjoints(Y, R, 2.0 * alpha / R.size, phys_cfg, loss_cfg.softening)
    if shared:
        grad = batch_backward(params, data_pass, g_data + g_Y, g_dY)
    else:
        grad = batch_backward(params, data_pass, g_data) + batch_backward(params, phys_pass, g_Y, g_dY)
    return breakdown, grad
