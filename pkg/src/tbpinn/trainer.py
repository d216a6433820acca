"""Training loop, optimizer and checkpoint files.

Checkpoint layout (little-endian)::

    b"TBPC" | format_version u32
    config_len u32 | UTF-8 "key=value" lines
    n_params u64 | n_params x f64
    crc32 u32 of every preceding byte
"""

from __future__ import annotations

import csv
import enum
import math
import os
import struct
import tempfile
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import Dataset, SimulationRecord, fingerprint
from .dynamics import PhysicsConfig
from .errors import ConfigMismatchError, DivergenceError, EmptySplitError, FormatError
from .loss import AlphaSchedule, LossConfig, ScheduleKind, alpha_at, loss_and_gradient
from .network import Formulation, NetworkConfig, ParameterStore, init_network, parameter_count

__all__ = [
    "TrainConfig",
    "AdamState",
    "EpochRow",
    "StopReason",
    "TrainReport",
    "Checkpoint",
    "split_dataset",
    "assemble_pairs",
    "adam_update",
    "clip_grad_norm",
    "train",
    "write_checkpoint",
    "read_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"TBPC"
CHECKPOINT_VERSION = 1
MIN_DELTA = 1e-6
EVAL_CHUNK = 8192


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 7.5e-4
    max_epochs: int = 500
    batch_size: int = 2048
    early_stop_patience: int = 10
    plateau_patience: int = 5
    plateau_factor: float = 0.7
    grad_clip_norm: float | None = 5.0
    weight_decay: float = 1e-5
    split_fraction: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive when set")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


# --- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_update(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float, weight_decay: float = 0.0):
    """One bias-corrected Adam step with decoupled weight decay applied first.

    Returns a new state and new parameters; inputs are left untouched.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError("params, grads and optimizer state must have equal shapes")
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = b1 * state.first_moment + (1.0 - b1) * grads
    v = b2 * state.second_moment + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    decayed = params * (1.0 - lr * weight_decay) if weight_decay else params
    new_params = decayed - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return AdamState(m, v, t, b1, b2, state.epsilon), new_params


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    norm = float(np.sqrt(np.dot(grads, grads)))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


# --- data plumbing --------------------------------------------------------------


def split_dataset(dataset: Dataset | Sequence[SimulationRecord], fraction: float, seed: int):
    """Shuffle converged simulations by ``seed`` and split them whole."""
    records = dataset.converged() if isinstance(dataset, Dataset) else [r for r in dataset if r.converged]
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(records)
    n_train = int(round(fraction * n))
    if n_train < 1 or n_train >= n:
        raise EmptySplitError(f"splitting {n} converged simulations at {fraction} leaves one side empty")
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B1])).permutation(n)
    train = [records[i] for i in sorted(order[:n_train])]
    val = [records[i] for i in sorted(order[n_train:])]
    return train, val


def assemble_pairs(records: Sequence[SimulationRecord], formulation: Formulation):
    """Input/target rows for ``formulation``, in record then time order.

    Non-autoregressive rows are ``[p1, p2, p3 at t=0, t] -> state(t)`` for every
    sample with ``t > 0``; autoregressive rows are ``[state_k, dt] -> state_{k+1}``.
    """
    formulation = Formulation(formulation) if not isinstance(formulation, Formulation) else formulation
    xs, ys = [], []
    for rec in records:
        V = rec.trajectory.vectors()
        if len(V) < 2:
            continue
        if formulation is Formulation.NON_AUTOREGRESSIVE:
            t = rec.trajectory.times()[1:, None]
            x = np.hstack([np.broadcast_to(V[0, :6], (len(t), 6)), t])
        else:
            x = np.hstack([V[:-1], np.full((len(V) - 1, 1), rec.trajectory.dt)])
        xs.append(x)
        ys.append(V[1:])
    if not xs:
        return np.zeros((0, 7 if formulation is Formulation.NON_AUTOREGRESSIVE else 13)), np.zeros((0, 12))
    return np.vstack(xs), np.vstack(ys)


# --- report -----------------------------------------------------------------------


class StopReason(enum.Enum):
    EARLY_STOP = "EarlyStop"
    MAX_EPOCHS = "MaxEpochs"


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    train_data_loss: float
    train_physics_loss: float
    alpha: float
    learning_rate: float
    val_data_loss: float
    val_physics_loss: float
    val_total_loss: float
    wall_time: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class TrainReport:
    rows: tuple[EpochRow, ...]
    best_epoch: int
    stopped_reason: StopReason

    def write_csv(self, path, include_timing: bool = False) -> None:
        names = [f.name for f in fields(EpochRow) if include_timing or f.name != "wall_time"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for row in self.rows:
                w.writerow([_fmt(getattr(row, n)) for n in names])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# --- checkpoint -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Checkpoint:
    network: NetworkConfig
    loss: LossConfig
    params: np.ndarray
    epoch: int = 0
    seed: int = 0
    dataset_fingerprint: str = ""
    dt: float = 0.0
    split_fraction: float = 0.95

    def __post_init__(self):
        p = np.ascontiguousarray(self.params, dtype=np.float64)
        if p.ndim != 1 or p.size != parameter_count(self.network):
            raise ValueError("parameter vector does not match the network config")
        object.__setattr__(self, "params", p)

    @property
    def physics_informed(self) -> bool:
        return self.loss.schedule.alpha_max > 0

    @property
    def model_name(self) -> str:
        kind = "pi" if self.physics_informed else "baseline"
        return f"{self.network.architecture.value}-{self.network.formulation.value}-{kind}"

    def store(self) -> ParameterStore:
        return ParameterStore(self.params, self.network)

    def validation_split(self, dataset):
        """The held-out simulations this checkpoint was validated on."""
        return split_dataset(dataset, self.split_fraction, self.seed)[1]

    def require(self, network: NetworkConfig | None = None, *, formulation: Formulation | None = None, dt: float | None = None):
        """Raise :class:`ConfigMismatchError` unless the checkpoint matches the request."""
        if network is not None and network != self.network:
            raise ConfigMismatchError(f"checkpoint holds {self.network}, requested {network}")
        if formulation is not None and self.network.formulation is not formulation:
            raise ConfigMismatchError(f"checkpoint formulation is {self.network.formulation.value}, need {formulation.value}")
        if dt is not None and self.dt and not math.isclose(dt, self.dt, rel_tol=0, abs_tol=1e-15):
            raise ConfigMismatchError(f"checkpoint was trained with dt={self.dt}, dataset has dt={dt}")

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return _config_lines(self) == _config_lines(other) and np.array_equal(self.params, other.params)


def _config_lines(ck: Checkpoint) -> list[str]:
    n, l, s = ck.network, ck.loss, ck.loss.schedule
    items = [
        ("architecture", n.architecture.value),
        ("depth", n.depth),
        ("width", n.width),
        ("activation", n.activation.value),
        ("formulation", n.formulation.value),
        ("alpha_schedule", s.kind.value),
        ("alpha0", s.alpha0),
        ("alpha_max", s.alpha_max),
        ("ramp_epochs", s.ramp_epochs),
        ("warmup_epochs", s.warmup_epochs),
        ("residual_clamp", "none" if l.residual_clamp is None else l.residual_clamp),
        ("softening", l.softening),
        ("extra_collocation", l.extra_collocation),
        ("epoch", ck.epoch),
        ("seed", ck.seed),
        ("dt", ck.dt),
        ("split_fraction", ck.split_fraction),
        ("dataset_fingerprint", ck.dataset_fingerprint),
    ]
    return [f"{k}={_fmt(v)}" for k, v in items]


def _encode_checkpoint(ck: Checkpoint) -> bytes:
    cfg = ("\n".join(_config_lines(ck)) + "\n").encode("utf-8")
    body = b"".join(
        [
            CHECKPOINT_MAGIC,
            struct.pack("<I", CHECKPOINT_VERSION),
            struct.pack("<I", len(cfg)),
            cfg,
            struct.pack("<Q", ck.params.size),
            ck.params.astype("<f8").tobytes(),
        ]
    )
    return body + struct.pack("<I", zlib.crc32(body))


def write_checkpoint(ck: Checkpoint, path) -> None:
    path = Path(path)
    data = _encode_checkpoint(ck)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated checkpoint")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    (cfg_len,) = struct.unpack_from("<I", data, 8)
    off = 12 + cfg_len
    if off + 8 > len(data) - 4:
        raise FormatError(f"{path}: truncated config block")
    try:
        text = data[12:off].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: config block is not UTF-8") from None
    (n_params,) = struct.unpack_from("<Q", data, off)
    off += 8
    if off + 8 * n_params != len(data) - 4:
        raise FormatError(f"{path}: parameter block length disagrees with count {n_params}")
    params = np.frombuffer(data, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    kv = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed config line {line!r}")
        kv[key.strip()] = value.strip()
    try:
        net = NetworkConfig(kv["architecture"], int(kv["depth"]), int(kv["width"]), kv["activation"], kv["formulation"])
        sched = AlphaSchedule(
            ScheduleKind(kv["alpha_schedule"]),
            float(kv["alpha0"]),
            float(kv["alpha_max"]),
            int(kv["ramp_epochs"]),
            int(kv["warmup_epochs"]),
        )
        clamp = None if kv["residual_clamp"] == "none" else float(kv["residual_clamp"])
        loss = LossConfig(sched, clamp, float(kv["softening"]), int(kv["extra_collocation"]))
        return Checkpoint(
            net,
            loss,
            params,
            int(kv["epoch"]),
            int(kv["seed"]),
            kv["dataset_fingerprint"],
            float(kv["dt"]),
            float(kv["split_fraction"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad config block ({exc})") from None


# --- training loop ------------------------------------------------------------------


def _extra_collocation(X: np.ndarray, k: int, rng: np.random.Generator, t_end: float) -> np.ndarray:
    # k random times for every initial condition present in the batch
    ics = np.unique(X[:, :6], axis=0)
    rows = np.repeat(ics, k, axis=0)
    t = rng.uniform(0.0, t_end, size=(rows.shape[0], 1))
    return np.vstack([X, np.hstack([rows, t])])


def _evaluate(params: ParameterStore, X, Y, alpha, loss_cfg, phys_cfg, with_physics):
    data = phys = 0.0
    n = X.shape[0]
    for lo in range(0, n, EVAL_CHUNK):
        hi = min(n, lo + EVAL_CHUNK)
        b, _ = loss_and_gradient(
            params, X[lo:hi], Y[lo:hi], alpha, loss_cfg, phys_cfg, need_gradient=False, with_physics=with_physics
        )
        data += b.data_loss * (hi - lo)
        phys += b.physics_loss * (hi - lo)
    return data / n, phys / n


def train(
    dataset: Dataset | Sequence[SimulationRecord],
    network_cfg: NetworkConfig,
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    phys_cfg: PhysicsConfig = PhysicsConfig(),
    *,
    with_physics: bool = True,
    progress: Callable[[EpochRow], None] | None = None,
):
    """Train from scratch and return ``(best checkpoint, report)``.

    Improvement means the validation total loss (at the current epoch's
    alpha) dropping by at least 1e-6. The learning rate is multiplied by
    ``plateau_factor`` after ``plateau_patience`` epochs without improvement
    and training stops after ``early_stop_patience`` such epochs.
    ``with_physics=False`` never evaluates the physics term.
    """
    records = dataset.converged() if isinstance(dataset, Dataset) else [r for r in dataset if r.converged]
    if len(records) < 2:
        raise EmptySplitError("training needs at least two converged simulations")
    if loss_cfg.extra_collocation and network_cfg.formulation is Formulation.AUTOREGRESSIVE:
        raise ValueError("extra collocation points are only defined for the non-autoregressive formulation")
    train_recs, val_recs = split_dataset(records, train_cfg.split_fraction, train_cfg.seed)
    Xt, Yt = assemble_pairs(train_recs, network_cfg.formulation)
    Xv, Yv = assemble_pairs(val_recs, network_cfg.formulation)
    if Xt.shape[0] == 0 or Xv.shape[0] == 0:
        raise EmptySplitError("a split has no training pairs")
    dt = float(records[0].trajectory.dt)
    t_end = dt * (max(len(r.trajectory) for r in records) - 1)
    fp = fingerprint(dataset) if isinstance(dataset, Dataset) else ""

    params = init_network(network_cfg, train_cfg.seed)
    adam = AdamState.zeros(len(params))
    rng = np.random.default_rng(np.random.SeedSequence([int(train_cfg.seed), 0xBA7C]))
    lr = train_cfg.learning_rate
    rows: list[EpochRow] = []
    best = (math.inf, -1, params.values)
    stale = 0
    plateau = 0
    reason = StopReason.MAX_EPOCHS
    n = Xt.shape[0]

    for epoch in range(train_cfg.max_epochs):
        start = time.perf_counter()
        alpha = alpha_at(loss_cfg.schedule, epoch) if with_physics else 0.0
        order = rng.permutation(n)
        sum_data = sum_phys = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo : lo + train_cfg.batch_size]
            Xb, Yb = Xt[idx], Yt[idx]
            col = _extra_collocation(Xb, loss_cfg.extra_collocation, rng, t_end) if loss_cfg.extra_collocation and with_physics else None
            b, grad = loss_and_gradient(params, Xb, Yb, alpha, loss_cfg, phys_cfg, col, with_physics=with_physics)
            if not math.isfinite(b.total) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"training loss became non-finite in epoch {epoch}", epoch=epoch)
            if train_cfg.grad_clip_norm is not None:
                grad = clip_grad_norm(grad, train_cfg.grad_clip_norm)
            adam, values = adam_update(adam, params.values, grad, lr, train_cfg.weight_decay)
            params = params.with_values(values)
            sum_data += b.data_loss * len(idx)
            sum_phys += b.physics_loss * len(idx)
        val_data, val_phys = _evaluate(params, Xv, Yv, alpha, loss_cfg, phys_cfg, with_physics)
        capped = min(val_phys, loss_cfg.residual_clamp) if loss_cfg.residual_clamp is not None else val_phys
        val_total = val_data + alpha * capped if with_physics else val_data
        if not math.isfinite(val_total):
            raise DivergenceError(f"validation loss became non-finite in epoch {epoch}", epoch=epoch)
        row = EpochRow(epoch, sum_data / n, sum_phys / n, alpha, lr, val_data, val_phys, val_total, time.perf_counter() - start)
        rows.append(row)
        if progress:
            progress(row)
        if val_total < best[0] - MIN_DELTA:
            best = (val_total, epoch, params.values)
            stale = plateau = 0
        else:
            stale += 1
            plateau += 1
            if stale >= train_cfg.early_stop_patience:
                reason = StopReason.EARLY_STOP
                break
            if plateau >= train_cfg.plateau_patience:
                lr *= train_cfg.plateau_factor
                plateau = 0

    _, best_epoch, best_values = best
    ck = Checkpoint(network_cfg, loss_cfg, best_values, best_epoch, train_cfg.seed, fp, dt, train_cfg.split_fraction)
    return ck, TrainReport(tuple(rows), best_epoch, reason)
