"""Error metrics, physics-informed error, ECDFs, rollouts and CSV reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datagen import SimulationRecord
from .dynamics import PhysicsConfig, SystemState
from .errors import ConfigMismatchError, DimensionError, DivergenceError
from .integrator import Trajectory
from .loss import batch_accelerations
from .network import Formulation, ParameterStore, batch_forward
from .trainer import Checkpoint, assemble_pairs

__all__ = [
    "MetricsReport",
    "PiErrorReport",
    "EcdfSeries",
    "LagErrorSeries",
    "metrics",
    "component_metrics",
    "per_sample_mae",
    "pi_error",
    "ecdf",
    "predict",
    "rollout",
    "rollout_batch",
    "error_vs_time",
    "mean_and_std",
    "write_metrics_csv",
    "write_component_csv",
    "write_ecdf_csv",
    "write_lag_csv",
    "write_rollout_csv",
]

COMPONENTS = ("p1x", "p1z", "p2x", "p2z", "p3x", "p3z", "v1x", "v1z", "v2x", "v2z", "v3x", "v3z")
_CHUNK = 8192


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    smape: float


@dataclass(frozen=True)
class PiErrorReport:
    value: float
    n_rows: int
    n_excluded: int


@dataclass(frozen=True)
class EcdfSeries:
    values: np.ndarray
    fractions: np.ndarray

    def __len__(self) -> int:
        return self.values.size

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.values.tolist(), self.fractions.tolist()))

    def fraction_below(self, threshold: float) -> float:
        """Fraction of samples strictly below ``threshold``."""
        k = np.searchsorted(self.values, threshold, side="left")
        return float(self.fractions[k - 1]) if k else 0.0


@dataclass(frozen=True)
class LagErrorSeries:
    times: np.ndarray
    errors: np.ndarray

    def __len__(self) -> int:
        return self.times.size


def _matching(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise DimensionError(f"need matching nonempty arrays, got {pred.shape} and {target.shape}")
    return pred, target


def _smape_terms(pred, target):
    num = 2.0 * np.abs(pred - target)
    den = np.abs(target) + np.abs(pred)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def metrics(predictions, targets) -> MetricsReport:
    """MAE, RMSE and symmetric MAPE (percent, ``0/0`` counted as 0) over all elements."""
    pred, target = _matching(predictions, targets)
    diff = np.abs(pred - target)
    # scale before squaring so tiny or huge errors neither underflow nor overflow
    scale = float(np.max(diff))
    rmse = scale * float(np.sqrt(np.mean((diff / scale) ** 2))) if scale > 0 and np.isfinite(scale) else scale
    return MetricsReport(
        float(np.mean(diff)),
        rmse,
        float(100.0 * np.mean(_smape_terms(pred, target))),
    )


def component_metrics(predictions, targets) -> list[MetricsReport]:
    pred, target = _matching(predictions, targets)
    if pred.ndim != 2:
        raise DimensionError("component metrics need (N, k) arrays")
    return [metrics(pred[:, j], target[:, j]) for j in range(pred.shape[1])]


def per_sample_mae(predictions, targets) -> np.ndarray:
    pred, target = _matching(predictions, targets)
    return np.mean(np.abs(pred - target), axis=-1)


def ecdf(values: Iterable[float]) -> EcdfSeries:
    """Empirical CDF with ties collapsed onto their largest rank."""
    v = np.sort(np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("ecdf of an empty sample")
    uniq, counts = np.unique(v, return_counts=True)
    return EcdfSeries(uniq, np.cumsum(counts) / v.size)


def mean_and_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def _store(model) -> ParameterStore:
    return model.store() if isinstance(model, Checkpoint) else model


def predict(model, X: np.ndarray) -> np.ndarray:
    store = _store(model)
    X = np.asarray(X, dtype=np.float64)
    out = np.empty((X.shape[0], 12))
    for lo in range(0, X.shape[0], _CHUNK):
        out[lo : lo + _CHUNK] = batch_forward(store, X[lo : lo + _CHUNK], keep=False).outputs
    return out


def pi_error(model, records: Sequence[SimulationRecord], phys_cfg: PhysicsConfig = PhysicsConfig()) -> PiErrorReport:
    """Mean squared ODE residual over every evaluation input, unsoftened and unclamped.

    Rows whose predicted bodies collide are left out and counted.
    """
    store = _store(model)
    X, _ = assemble_pairs([r for r in records if r.converged], store.config.formulation)
    if X.shape[0] == 0:
        raise ValueError("no evaluation inputs")
    ti = store.config.time_index
    total = 0.0
    used = 0
    excluded = 0
    for lo in range(0, X.shape[0], _CHUNK):
        res = batch_forward(store, X[lo : lo + _CHUNK], ti, keep=False)
        Y, dY = res.outputs, res.tangents
        acc, singular = batch_accelerations(Y[:, :6], phys_cfg, 0.0)
        R = np.concatenate([dY[:, :6] - Y[:, 6:], dY[:, 6:] - acc], axis=1)[~singular]
        total += float(np.sum(R * R))
        used += R.shape[0]
        excluded += int(singular.sum())
    value = total / (12 * used) if used else math.nan
    return PiErrorReport(value, used, excluded)


def rollout_batch(model, initial: np.ndarray, n_steps: int, dt: float) -> np.ndarray:
    """Roll ``(N, 12)`` states forward ``n_steps`` times; returns ``(N, n_steps + 1, 12)``."""
    store = _store(model)
    if store.config.formulation is not Formulation.AUTOREGRESSIVE:
        raise ConfigMismatchError("rollout needs an autoregressive model")
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    Y0 = np.atleast_2d(np.asarray(initial, dtype=np.float64))
    if Y0.shape[1] != 12:
        raise DimensionError("initial states must be 12-vectors")
    out = np.empty((Y0.shape[0], n_steps + 1, 12))
    out[:, 0] = Y0
    step = np.full((Y0.shape[0], 1), float(dt))
    for k in range(n_steps):
        nxt = batch_forward(store, np.hstack([out[:, k], step]), keep=False).outputs
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"rollout produced non-finite state at step {k + 1}", epoch=None)
        out[:, k + 1] = nxt
    return out


def rollout(model, ic, n_steps: int, dt: float) -> Trajectory:
    """Feed the model its own output ``n_steps`` times with fixed step ``dt``."""
    y0 = ic.vector() if isinstance(ic, SystemState) else np.asarray(ic, dtype=np.float64)
    path = rollout_batch(model, y0[None, :], n_steps, dt)[0]
    states = tuple(SystemState.from_vector(k * dt, y) for k, y in enumerate(path))
    return Trajectory(states, float(dt), True)


def error_vs_time(model, records: Sequence[SimulationRecord]) -> LagErrorSeries:
    """Mean absolute error at every sample time, including ``t = 0``.

    Non-autoregressive models are queried at each sample time directly;
    autoregressive ones are rolled out from the initial state.
    """
    store = _store(model)
    recs = [r for r in records if r.converged]
    if not recs:
        raise ValueError("no converged records")
    n_times = min(len(r.trajectory) for r in recs)
    dt = recs[0].trajectory.dt
    truth = np.stack([r.trajectory.vectors()[:n_times] for r in recs])
    if store.config.formulation is Formulation.AUTOREGRESSIVE:
        pred = rollout_batch(store, truth[:, 0], n_times - 1, dt)
    else:
        t = np.arange(n_times) * dt
        X = np.concatenate(
            [np.repeat(truth[:, 0, :6], n_times, axis=0), np.tile(t, len(recs))[:, None]], axis=1
        )
        pred = predict(store, X).reshape(len(recs), n_times, 12)
    err = np.mean(np.abs(pred - truth), axis=(0, 2))
    return LagErrorSeries(np.arange(n_times) * dt, err)


# --- CSV -----------------------------------------------------------------------


def _num(v) -> str:
    return repr(float(v))


def _write(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else _num(v)) for v in row])


def write_metrics_csv(path, rows: Sequence[tuple[str, int, MetricsReport, float]]) -> None:
    _write(path, ["model", "seed", "mae", "rmse", "smape", "pi_error"], [(m, s, r.mae, r.rmse, r.smape, pi) for m, s, r, pi in rows])


def write_component_csv(path, reports: Sequence[MetricsReport]) -> None:
    _write(path, ["component", "mae", "rmse", "smape"], [(c, r.mae, r.rmse, r.smape) for c, r in zip(COMPONENTS, reports)])


def write_ecdf_csv(path, series: EcdfSeries) -> None:
    _write(path, ["value", "fraction"], series.pairs())


def write_lag_csv(path, series: LagErrorSeries) -> None:
    _write(path, ["t", "mean_abs_error"], zip(series.times.tolist(), series.errors.tolist()))


def write_rollout_csv(path, trajectory: Trajectory, phys_cfg: PhysicsConfig = PhysicsConfig()) -> None:
    """Times, canonical states and per-body kinetic energy."""
    m = np.asarray(phys_cfg.masses)
    rows = []
    for s in trajectory.states:
        ke = 0.5 * m * np.sum(s.vel * s.vel, axis=1)
        rows.append([s.t, *s.vector().tolist(), *ke.tolist()])
    _write(path, ["t", *COMPONENTS, "ke1", "ke2", "ke3"], rows)
