"""Self-checks behind ``tbpinn verify``.

Each check reports a measured value against a tolerance. The suites use
closed-form solutions and finite differences as oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .datagen import initial_condition
from .dynamics import PhysicsConfig, SystemState, accelerations, conserved_quantities, energies
from .integrator import IntegratorConfig, integrate_to, sample_trajectory
from .loss import DEFAULT_SOFTENING, batch_accelerations, loss_and_gradient, physics_loss_and_gradient, tape_physics_residual
from .network import (
    NetworkConfig,
    ParameterStore,
    batch_forward,
    init_network,
    parameter_count,
    tape_forward,
    tape_forward_with_time_derivative,
)

__all__ = ["Check", "SUITES", "run_suite", "gradient_errors", "figure_eight", "lagrange_triangle", "FIGURE_EIGHT_PERIOD"]

FIGURE_EIGHT_PERIOD = 6.32591398


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    measured: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.measured <= self.tolerance)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"[{verdict}] {self.suite}/{self.name}: measured {self.measured:.3e} (tolerance {self.tolerance:.1e})"


def figure_eight() -> SystemState:
    """Equal-mass figure-eight choreography (standard published digits)."""
    x1 = np.array([0.97000436, -0.24308753])
    v3 = np.array([-0.93240737, -0.86473146])
    pos = np.array([x1, -x1, [0.0, 0.0]])
    vel = np.array([-v3 / 2, -v3 / 2, v3])
    return SystemState(0.0, pos, vel)


def lagrange_triangle() -> tuple[SystemState, float]:
    """Rigidly rotating equilateral triangle of side 1 and its period."""
    radius = 1.0 / math.sqrt(3.0)
    angles = np.array([math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3])
    pos = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    vel = np.stack([-np.sin(angles), np.cos(angles)], axis=1)  # speed 1, counter-clockwise
    return SystemState(0.0, pos, vel), 2 * math.pi / math.sqrt(3.0)


def _dynamics_suite() -> list[Check]:
    rng = np.random.default_rng(7)
    cfg = PhysicsConfig()
    momentum_rate = 0.0
    fd_force = 0.0
    for _ in range(20):
        pos = rng.uniform(-1.0, 1.0, (3, 2))
        acc = accelerations(pos, cfg)
        momentum_rate = max(momentum_rate, float(np.max(np.abs(np.asarray(cfg.masses) @ acc))))
        # force = -grad U, by central differences of the potential energy
        for b in range(3):
            for c in range(2):
                h = 1e-6
                pp, pm = pos.copy(), pos.copy()
                pp[b, c] += h
                pm[b, c] -= h
                up = energies(SystemState(0.0, pp, np.zeros((3, 2))), cfg).potential
                um = energies(SystemState(0.0, pm, np.zeros((3, 2))), cfg).potential
                fd = -(up - um) / (2 * h) / cfg.masses[b]
                fd_force = max(fd_force, abs(fd - acc[b, c]) / max(1.0, abs(acc[b, c])))
    return [
        Check("dynamics", "total momentum rate", momentum_rate, 1e-12),
        Check("dynamics", "acceleration vs -grad U (finite differences)", fd_force, 1e-6),
    ]


def _integrator_suite() -> list[Check]:
    icfg = IntegratorConfig(tolerance=1e-10)
    fig = figure_eight()
    end = integrate_to(fig, FIGURE_EIGHT_PERIOD, icfg=icfg)
    fig_err = float(np.max(np.abs(end.vector() - fig.vector()))) if isinstance(end, SystemState) else math.inf
    tri, period = lagrange_triangle()
    end = integrate_to(tri, period, icfg=icfg)
    tri_err = float(np.max(np.abs(end.vector() - tri.vector()))) if isinstance(end, SystemState) else math.inf
    drift = mom = com = 0.0
    for theta, s in [(1.2, 0.4), (0.7, 0.8), (1.5, 0.95)]:
        ic = initial_condition(theta, s).state()
        traj = sample_trajectory(ic, 10.0, 0.0390625, icfg=icfg)
        e0 = energies(ic).total
        q0 = conserved_quantities(ic)
        for st in traj.states:
            drift = max(drift, abs(energies(st).total - e0) / abs(e0))
            q = conserved_quantities(st)
            mom = max(mom, abs(q.momentum.x - q0.momentum.x), abs(q.momentum.z - q0.momentum.z))
            com = max(com, abs(q.center_of_mass.x - q0.center_of_mass.x), abs(q.center_of_mass.z - q0.center_of_mass.z))
        if not traj.converged:
            drift = math.inf
    return [
        Check("integrator", "figure-eight closure after one period", fig_err, 1e-6),
        Check("integrator", "Lagrange triangle closure after one period", tri_err, 1e-8),
        Check("integrator", "relative energy drift over t in [0, 10]", drift, 1e-8),
        Check("integrator", "momentum drift", mom, 1e-9),
        Check("integrator", "centre-of-mass drift", com, 1e-9),
    ]


_EXT = np.longdouble


def _ext_forward(w, cfg: NetworkConfig, X: np.ndarray, tangent: bool):
    # independent extended-precision evaluation of a DNN with smooth activation
    h = X.astype(_EXT)
    dh = np.zeros_like(h)
    dh[:, cfg.time_index] = 1
    layout = ParameterStore(np.zeros(parameter_count(cfg)), cfg).layout
    c, k = _EXT(ad.GELU_C), _EXT(ad.GELU_K)
    for spec in layout:
        W = w[spec.w_offset : spec.b_offset].reshape(spec.fan_out, spec.fan_in)
        z = h @ W.T + w[spec.b_offset : spec.b_offset + spec.fan_out]
        dz = dh @ W.T
        if spec.activated:
            if cfg.activation.value == "tanh":
                h = np.tanh(z)
                dh = (1 - h * h) * dz
            else:
                th = np.tanh(c * (z + k * z**3))
                h = z * (1 + th) / 2
                dh = ((1 + th) / 2 + z * (1 - th * th) * c * (1 + 3 * k * z * z) / 2) * dz
        else:
            h, dh = z, dz
    return h, (dh if tangent else None)


def _ext_residual(out, d, cfg: PhysicsConfig, softening: float):
    acc = np.zeros((out.shape[0], 6), dtype=_EXT)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        dx = out[:, 2 * j] - out[:, 2 * i]
        dz = out[:, 2 * j + 1] - out[:, 2 * i + 1]
        r2 = dx * dx + dz * dz + _EXT(softening) ** 2
        inv3 = _EXT(cfg.G) / (r2 * np.sqrt(r2))
        acc[:, 2 * i] += _EXT(cfg.masses[j]) * inv3 * dx
        acc[:, 2 * i + 1] += _EXT(cfg.masses[j]) * inv3 * dz
        acc[:, 2 * j] -= _EXT(cfg.masses[i]) * inv3 * dx
        acc[:, 2 * j + 1] -= _EXT(cfg.masses[i]) * inv3 * dz
    return np.concatenate([d[:, :6] - out[:, 6:], d[:, 6:] - acc], axis=1)


def _fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def gradient_errors(trials: int = 100, seed: int = 11) -> dict[str, float]:
    """Worst relative gradient error over random depth-2 width-8 networks.

    Both analytic routes (scalar tape and batched kernel) are compared with
    central differences of the loss value; the physics loss exercises the
    forward-over-reverse path.
    The difference quotients are evaluated in extended precision so that
    stiff near-collision predictions do not drown them in roundoff.
    """
    rng = np.random.default_rng(seed)
    phys = PhysicsConfig()
    worst = {"data_tape": 0.0, "data_batch": 0.0, "physics_tape": 0.0, "physics_batch": 0.0}
    for trial in range(trials):
        cfg = NetworkConfig("dnn", 2, 8, ("tanh", "gelu")[trial % 2], "nar")
        w0 = init_network(cfg, int(rng.integers(2**31))).values + 0.05 * rng.normal(size=parameter_count(cfg))
        X = np.hstack([rng.uniform(-1, 1, (3, 6)), rng.uniform(0.1, 2.0, (3, 1))])
        T = rng.normal(size=(3, 12))

        def data_value(w):
            out, _ = _ext_forward(w, cfg, X, tangent=False)
            return np.mean(np.abs(out - T))

        def phys_value(w):
            out, d = _ext_forward(w, cfg, X, tangent=True)
            return np.mean(_ext_residual(out, d, phys, DEFAULT_SOFTENING) ** 2)

        tape = ad.Tape()
        w = tape.params_from(w0)
        terms = []
        for x, y in zip(X, T):
            out = tape_forward(w, cfg, list(x))
            terms.extend(ad.absolute(o - t) for o, t in zip(out, y))
        data_tape = ad.backward(ad.mean(terms), w)

        tape = ad.Tape()
        w = tape.params_from(w0)
        terms = []
        for x in X:
            out, d = tape_forward_with_time_derivative(w, cfg, list(x))
            terms.extend(ad.square(v) for v in tape_physics_residual(out, d, phys, DEFAULT_SOFTENING))
        phys_tape = ad.backward(ad.mean(terms), w)

        store = ParameterStore(w0, cfg)
        _, data_batch = loss_and_gradient(store, X, T, 0.0, with_physics=False)
        _, phys_batch = physics_loss_and_gradient(store, X, phys, DEFAULT_SOFTENING)

        fd_data = _fd_gradient(data_value, w0.astype(_EXT)).astype(np.float64)
        fd_phys = _fd_gradient(phys_value, w0.astype(_EXT)).astype(np.float64)
        worst["data_tape"] = max(worst["data_tape"], _rel_err(data_tape, fd_data))
        worst["data_batch"] = max(worst["data_batch"], _rel_err(data_batch, fd_data))
        worst["physics_tape"] = max(worst["physics_tape"], _rel_err(phys_tape, fd_phys))
        worst["physics_batch"] = max(worst["physics_batch"], _rel_err(phys_batch, fd_phys))
    return worst


def _autodiff_suite(trials: int = 20) -> list[Check]:
    e = gradient_errors(trials)
    return [
        Check("autodiff", "data-loss gradient, tape vs finite differences", e["data_tape"], 1e-5),
        Check("autodiff", "data-loss gradient, batched vs finite differences", e["data_batch"], 1e-5),
        Check("autodiff", "physics-loss gradient, tape vs finite differences", e["physics_tape"], 1e-4),
        Check("autodiff", "physics-loss gradient, batched vs finite differences", e["physics_batch"], 1e-4),
    ]


SUITES: dict[str, Callable[[], list[Check]]] = {
    "dynamics": _dynamics_suite,
    "integrator": _integrator_suite,
    "autodiff": _autodiff_suite,
}


def run_suite(name: str) -> list[Check]:
    if name == "all":
        return [c for key in SUITES for c in SUITES[key]()]
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}")
    return SUITES[name]()
