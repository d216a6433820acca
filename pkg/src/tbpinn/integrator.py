"""Adaptive Bulirsch-Stoer integration of the three-body problem.

The numerical work happens in a small kernel that comes in two flavours: a
compiled Cython extension (``_bs_core``) and a pure-Python mirror
(``_bs_py``). The compiled one is used when importable; set
``TBP_BACKEND=python`` to force the fallback. Both give bit-identical
results.

Internally the kernel runs in x87 extended precision and samples are rounded
to float64. A step is accepted when both the per-component scaled
extrapolation error and the first-order relative energy error implied by it
are below ``tolerance``.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _bs_py
from .dynamics import PhysicsConfig, SystemState, energies
from .errors import SingularityError

try:
    from . import _bs_core
except ImportError:  # pragma: no cover - depends on the build
    _bs_core = None

__all__ = [
    "BACKEND",
    "available_backends",
    "get_kernel",
    "IntegratorConfig",
    "FailureReason",
    "ConvergenceVerdict",
    "Trajectory",
    "BSStepResult",
    "modified_midpoint",
    "bs_step",
    "integrate_to",
    "sample_trajectory",
]


def available_backends() -> list[str]:
    return (["cython"] if _bs_core is not None else []) + ["python"]


def get_kernel(backend: str | None = None):
    """Return the kernel module for ``backend`` (``"cython"``, ``"python"`` or default)."""
    name = backend or BACKEND
    if name == "cython":
        if _bs_core is None:
            raise RuntimeError("compiled kernel is not built; reinstall with Cython available")
        return _bs_core
    if name == "python":
        return _bs_py
    raise ValueError(f"unknown backend {name!r}")


BACKEND = os.environ.get("TBP_BACKEND") or ("cython" if _bs_core is not None else "python")
if BACKEND not in available_backends():
    BACKEND = "python"


@dataclass(frozen=True)
class IntegratorConfig:
    tolerance: float = 1e-10
    initial_step: float = 1e-3
    min_step: float = 1e-14
    max_extrapolation_columns: int = 8
    max_steps_per_interval: int = 10_000_000
    safety_factor: float = 0.9
    # relative energy drift above which a sampled trajectory is declared unconverged
    energy_tolerance: float | None = 1e-8

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.min_step < self.initial_step:
            raise ValueError("need 0 < min_step < initial_step")
        if not 3 <= self.max_extrapolation_columns <= 16:
            raise ValueError("max_extrapolation_columns must lie in [3, 16]")
        if not 0 < self.safety_factor < 1:
            raise ValueError("safety_factor must lie in (0, 1)")
        if self.max_steps_per_interval < 1:
            raise ValueError("max_steps_per_interval must be positive")

    @property
    def initial_order(self) -> int:
        return min(4, self.max_extrapolation_columns - 2)


class FailureReason(enum.Enum):
    STEP_UNDERFLOW = "StepUnderflow"
    STEP_BUDGET_EXCEEDED = "StepBudgetExceeded"
    SINGULARITY = "Singularity"
    ENERGY_DRIFT = "EnergyDrift"
    # read back from a file, which stores only the converged flag
    UNRECORDED = "Unrecorded"


_STATUS = {
    _bs_py.UNDERFLOW: FailureReason.STEP_UNDERFLOW,
    _bs_py.BUDGET: FailureReason.STEP_BUDGET_EXCEEDED,
    _bs_py.SINGULAR: FailureReason.SINGULARITY,
}


@dataclass(frozen=True)
class ConvergenceVerdict:
    converged: bool
    failure_time: float | None = None
    failure_reason: FailureReason | None = None

    def __post_init__(self):
        if self.converged != (self.failure_reason is None and self.failure_time is None):
            raise ValueError("failure fields must be present exactly when not converged")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled states ``states[k]`` at ``t = k * dt``."""

    states: tuple[SystemState, ...]
    dt: float
    converged: bool
    verdict: ConvergenceVerdict = ConvergenceVerdict(True)
    n_evals: int = 0

    def __len__(self) -> int:
        return len(self.states)

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def vectors(self) -> np.ndarray:
        """``(n_states, 12)`` array of canonical state vectors."""
        if not self.states:
            return np.zeros((0, 12))
        return np.stack([s.vector() for s in self.states])

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.dt == other.dt
            and self.converged == other.converged
            and len(self.states) == len(other.states)
            and all(a == b for a, b in zip(self.states, other.states))
        )


class BSStepResult(NamedTuple):
    state_out: SystemState
    error_estimate: float
    accepted: bool
    H_next: float
    order_next: int
    n_evals: int


def _params(cfg: PhysicsConfig, icfg: IntegratorConfig):
    return _bs_py.Params(
        cfg.masses,
        cfg.G,
        cfg.distance_floor,
        icfg.tolerance,
        icfg.min_step,
        icfg.max_extrapolation_columns,
        icfg.max_steps_per_interval,
        icfg.safety_factor,
    )


def modified_midpoint(
    state: SystemState,
    H: float,
    n_substeps: int,
    cfg: PhysicsConfig = PhysicsConfig(),
    *,
    backend: str | None = None,
) -> SystemState:
    """Advance ``state`` by ``H`` with ``n_substeps`` modified-midpoint substeps.

    Includes the final smoothing ``(z_n + z_{n-1} + h f(z_n)) / 2``.
    """
    if n_substeps < 2 or n_substeps % 2:
        raise ValueError(f"n_substeps must be even and >= 2, got {n_substeps}")
    if H < 0:
        raise ValueError("H must be nonnegative")
    if H == 0:
        return state
    status, y = get_kernel(backend).mmid_step(state.vector().tolist(), float(H), int(n_substeps), _params(cfg, IntegratorConfig()))
    if status == _bs_py.SINGULAR:
        raise SingularityError("collision during modified-midpoint step")
    return SystemState.from_vector(state.t + H, y)


def bs_step(
    state: SystemState,
    H_try: float,
    cfg: PhysicsConfig = PhysicsConfig(),
    icfg: IntegratorConfig = IntegratorConfig(),
    *,
    order: int | None = None,
    backend: str | None = None,
) -> BSStepResult:
    """Attempt one extrapolated step.

    Substep counts 2, 4, 6, ... are extrapolated to zero step size with a
    Neville tableau in ``h**2``. ``order`` is the target tableau column
    (0-based); the result carries the controller's suggestion for the next one.
    A singular configuration is reported as a rejected step with infinite
    error.
    """
    if H_try < icfg.min_step:
        raise ValueError(f"H_try={H_try} is below min_step={icfg.min_step}")
    kc = icfg.initial_order if order is None else int(order)
    status, y, err, accepted, hn, kn, ne = get_kernel(backend).bs_step(
        state.vector().tolist(), float(H_try), kc, _params(cfg, icfg)
    )
    if status == _bs_py.SINGULAR:
        return BSStepResult(state, math.inf, False, 0.5 * H_try, kc, ne)
    out = SystemState.from_vector(state.t + H_try, y) if accepted else state
    return BSStepResult(out, err, accepted, hn, kn, ne)


def integrate_to(
    state: SystemState,
    t_target: float,
    cfg: PhysicsConfig = PhysicsConfig(),
    icfg: IntegratorConfig = IntegratorConfig(),
    *,
    backend: str | None = None,
) -> SystemState | ConvergenceVerdict:
    """Integrate to exactly ``t_target``; failures come back as a verdict, never raised."""
    if t_target < state.t:
        raise ValueError("t_target precedes the state time")
    if t_target == state.t:
        return state
    status, y, t, _, _, _, _ = get_kernel(backend).integrate(
        state.vector().tolist(), state.t, float(t_target), icfg.initial_step, icfg.initial_order, _params(cfg, icfg)
    )
    if status != _bs_py.OK:
        return ConvergenceVerdict(False, t, _STATUS[status])
    return SystemState.from_vector(t_target, y)


def _separated(state: SystemState, cfg: PhysicsConfig) -> bool:
    try:
        energies(state, cfg)
    except SingularityError:
        return False
    return True


def sample_trajectory(
    ic: SystemState,
    t_end: float,
    dt: float,
    cfg: PhysicsConfig = PhysicsConfig(),
    icfg: IntegratorConfig = IntegratorConfig(),
    *,
    backend: str | None = None,
) -> Trajectory:
    """States at every multiple of ``dt`` from 0 through ``t_end``.

    Adaptive steps are chosen independently of ``dt`` and the extended
    precision state is carried across sample points. On failure the
    trajectory is truncated after the last good sample and ``converged`` is
    false.
    """
    if dt <= 0 or t_end < 0:
        raise ValueError("need dt > 0 and t_end >= 0")
    if ic.t != 0:
        raise ValueError("initial condition must start at t = 0")
    n = int(round(t_end / dt))
    if abs(n * dt - t_end) > 1e-12 * max(1.0, abs(t_end)):
        raise ValueError(f"dt={dt} does not divide t_end={t_end}")

    status, samples, t_reached, nevals = get_kernel(backend).trajectory(
        ic.vector().tolist(), float(dt), n, icfg.initial_step, icfg.initial_order, _params(cfg, icfg)
    )
    states = [ic] + [SystemState.from_vector(k * dt, y) for k, y in enumerate(samples[1:], start=1)]
    verdict = ConvergenceVerdict(True)
    if status != _bs_py.OK:
        verdict = ConvergenceVerdict(False, t_reached, _STATUS[status])

    if icfg.energy_tolerance is not None and len(states) > 1:
        e0 = energies(states[0], cfg).total if _separated(states[0], cfg) else None
        for k in range(1, len(states)):
            if e0 is None or not _separated(states[k], cfg):
                verdict = ConvergenceVerdict(False, states[k].t, FailureReason.SINGULARITY)
                states = states[:k]
                break
            drift = abs(energies(states[k], cfg).total - e0) / abs(e0)
            if not drift <= icfg.energy_tolerance:
                verdict = ConvergenceVerdict(False, states[k].t, FailureReason.ENERGY_DRIFT)
                states = states[:k]
                break
    return Trajectory(tuple(states), float(dt), verdict.converged, verdict, int(nevals))
