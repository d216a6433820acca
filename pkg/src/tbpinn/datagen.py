"""Initial-condition sampling, batch simulation and the dataset file format.

File layout (little-endian)::

    b"TBPD" | format_version u32
    n_requested u64 | n_converged u64 | dt f64 | t_end f64 | tolerance f64 | master_seed u64
    per record:
        sim_id u64 | theta f64 | s f64 | converged u8 | wall_time f64 | n_states u32
        n_states x 13 f64   (t, then the canonical 12-vector)
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import PhysicsConfig, SystemState, Vec2
from .errors import FormatError
from .integrator import ConvergenceVerdict, FailureReason, IntegratorConfig, Trajectory, sample_trajectory

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "SINGULAR_POINT",
    "InitialCondition",
    "SimulationRecord",
    "DatasetMeta",
    "Dataset",
    "initial_condition",
    "record_rng",
    "sample_initial_condition",
    "simulate",
    "generate_dataset",
    "fingerprint",
    "write_dataset",
    "read_dataset",
    "proximity_stats",
]

MAGIC = b"TBPD"
FORMAT_VERSION = 1
DEFAULT_DT = 0.0390625
DEFAULT_T_END = 10.0
# p2 and p3 coincide here when theta = 0, s = 1
SINGULAR_POINT = (-0.5, 0.0)

_HEADER = struct.Struct("<4sI")
_META = struct.Struct("<QQdddQ")
_REC = struct.Struct("<QddBdI")


@dataclass(frozen=True)
class InitialCondition:
    theta: float
    s: float
    p1: Vec2
    p2: Vec2
    p3: Vec2
    seed_index: int = 0

    def state(self) -> SystemState:
        return SystemState(0.0, [self.p1, self.p2, self.p3], np.zeros((3, 2)))


def initial_condition(theta: float, s: float, index: int = 0) -> InitialCondition:
    """Build the Algorithm-1 configuration for given ``theta`` and ``s``.

    Body 1 sits at (1, 0), body 2 at ``s * (-min(0.5, cos theta), sin theta)``
    and body 3 balances the centre of mass at the origin. Velocities are zero.
    """
    if not 0.0 <= theta <= math.pi / 2 or not 0.0 <= s <= 1.0:
        raise ValueError(f"theta={theta}, s={s} out of range")
    px = -min(0.5, math.cos(theta))
    pz = math.sin(theta)
    p2 = Vec2(s * px, s * pz)
    p1 = Vec2(1.0, 0.0)
    p3 = Vec2(-p1.x - p2.x, -p1.z - p2.z)
    return InitialCondition(float(theta), float(s), p1, p2, p3, int(index))


def record_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for one record, derived from ``(master_seed, index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


def sample_initial_condition(rng: np.random.Generator, index: int) -> InitialCondition:
    theta = rng.uniform(0.0, math.pi / 2)
    s = rng.uniform(0.0, 1.0)
    return initial_condition(theta, s, index)


@dataclass(frozen=True, eq=False)
class SimulationRecord:
    sim_id: int
    ic: InitialCondition
    trajectory: Trajectory
    wall_time_seconds: float = 0.0

    @property
    def converged(self) -> bool:
        return self.trajectory.converged

    def __eq__(self, other):
        if not isinstance(other, SimulationRecord):
            return NotImplemented
        return (
            self.sim_id == other.sim_id
            and self.ic == other.ic
            and self.trajectory == other.trajectory
            and self.wall_time_seconds == other.wall_time_seconds
        )


@dataclass(frozen=True)
class DatasetMeta:
    n_requested: int
    n_converged: int
    dt: float
    t_end: float
    tolerance: float
    master_seed: int
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.n_converged > self.n_requested:
            raise ValueError("n_converged exceeds n_requested")


@dataclass(eq=False)
class Dataset:
    records: list[SimulationRecord]
    meta: DatasetMeta
    fingerprint: str = field(default="")

    def __len__(self) -> int:
        return len(self.records)

    def converged(self) -> list[SimulationRecord]:
        return [r for r in self.records if r.converged]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.meta == other.meta and self.records == other.records


def simulate(
    ic: InitialCondition,
    sim_id: int,
    dt: float = DEFAULT_DT,
    t_end: float = DEFAULT_T_END,
    phys_cfg: PhysicsConfig = PhysicsConfig(),
    int_cfg: IntegratorConfig = IntegratorConfig(),
    record_timing: bool = False,
) -> SimulationRecord:
    start = time.perf_counter()
    traj = sample_trajectory(ic.state(), t_end, dt, phys_cfg, int_cfg)
    wall = time.perf_counter() - start if record_timing else 0.0
    return SimulationRecord(sim_id, ic, traj, wall)


def _simulate_range(args):
    lo, hi, master_seed, phys_cfg, int_cfg, dt, t_end, record_timing = args
    out = []
    for i in range(lo, hi):
        ic = sample_initial_condition(record_rng(master_seed, i), i)
        out.append(simulate(ic, i, dt, t_end, phys_cfg, int_cfg, record_timing))
    return out


def generate_dataset(
    n: int,
    master_seed: int,
    phys_cfg: PhysicsConfig = PhysicsConfig(),
    int_cfg: IntegratorConfig = IntegratorConfig(),
    dt: float = DEFAULT_DT,
    t_end: float = DEFAULT_T_END,
    *,
    workers: int = 1,
    record_timing: bool = False,
    progress=None,
) -> Dataset:
    """Simulate ``n`` Algorithm-1 initial conditions.

    Output depends only on the arguments, not on ``workers``. Non-converged
    runs are kept with truncated trajectories. Wall times are only measured
    when ``record_timing`` is set (they are zero otherwise so files stay
    reproducible).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 <= master_seed < 2**64:
        raise ValueError("master_seed must fit in an unsigned 64-bit integer")
    chunk = max(1, min(64, n // max(1, 4 * workers)))
    jobs = [
        (lo, min(n, lo + chunk), master_seed, phys_cfg, int_cfg, dt, t_end, record_timing)
        for lo in range(0, n, chunk)
    ]
    records: list[SimulationRecord] = []
    if workers <= 1:
        for job in jobs:
            records.extend(_simulate_range(job))
            if progress:
                progress(len(records), n)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_simulate_range, jobs):
                records.extend(part)
                if progress:
                    progress(len(records), n)
    meta = DatasetMeta(
        n_requested=n,
        n_converged=sum(r.converged for r in records),
        dt=float(dt),
        t_end=float(t_end),
        tolerance=float(int_cfg.tolerance),
        master_seed=int(master_seed),
    )
    return Dataset(records, meta)


def _encode(dataset: Dataset) -> bytes:
    m = dataset.meta
    parts = [
        _HEADER.pack(MAGIC, m.format_version),
        _META.pack(m.n_requested, m.n_converged, m.dt, m.t_end, m.tolerance, m.master_seed),
    ]
    for r in dataset.records:
        traj = r.trajectory
        block = np.empty((len(traj.states), 13), dtype="<f8")
        if len(traj.states):
            block[:, 0] = traj.times()
            block[:, 1:] = traj.vectors()
        parts.append(_REC.pack(r.sim_id, r.ic.theta, r.ic.s, int(r.converged), r.wall_time_seconds, len(traj.states)))
        parts.append(block.tobytes())
    return b"".join(parts)


def fingerprint(dataset: Dataset) -> str:
    """SHA-256 of the file encoding; equals ``read_dataset(path).fingerprint``."""
    return dataset.fingerprint or hashlib.sha256(_encode(dataset)).hexdigest()


def write_dataset(dataset: Dataset, path) -> None:
    """Atomically write ``dataset`` to ``path``."""
    path = Path(path)
    data = _encode(dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    _, version = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    off = _HEADER.size
    if len(data) < off + _META.size:
        raise FormatError(f"{path}: truncated header")
    n_req, n_conv, dt, t_end, tol, seed = _META.unpack_from(data, off)
    off += _META.size
    try:
        meta = DatasetMeta(n_req, n_conv, dt, t_end, tol, seed, version)
    except ValueError as exc:
        raise FormatError(f"{path}: inconsistent metadata ({exc})") from None

    records = []
    for idx in range(n_req):
        if len(data) < off + _REC.size:
            raise FormatError(f"{path}: truncated in record header (record {idx}, expected sim_id {idx})")
        sim_id, theta, s, conv, wall, n_states = _REC.unpack_from(data, off)
        off += _REC.size
        nbytes = n_states * 13 * 8
        if len(data) < off + nbytes:
            raise FormatError(f"{path}: truncated in states of sim_id {sim_id}")
        block = np.frombuffer(data, dtype="<f8", count=n_states * 13, offset=off).reshape(n_states, 13)
        off += nbytes
        if conv not in (0, 1):
            raise FormatError(f"{path}: bad converged flag in sim_id {sim_id}")
        try:
            ic = initial_condition(theta, s, sim_id)
        except ValueError as exc:
            raise FormatError(f"{path}: sim_id {sim_id}: {exc}") from None
        states = tuple(SystemState.from_vector(row[0], row[1:]) for row in block)
        if conv:
            verdict = ConvergenceVerdict(True)
        else:
            last_t = float(block[-1, 0]) if n_states else 0.0
            verdict = ConvergenceVerdict(False, last_t, FailureReason.UNRECORDED)
        records.append(SimulationRecord(int(sim_id), ic, Trajectory(states, dt, bool(conv), verdict), wall))
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes after the last record")
    if sum(r.converged for r in records) != n_conv:
        raise FormatError(f"{path}: converged count disagrees with metadata")
    return Dataset(records, meta, hashlib.sha256(data).hexdigest())


def proximity_stats(dataset: Dataset, radius: float = 0.1) -> dict:
    """Non-convergence rate near the p2/p3 coincidence point versus globally."""
    n = len(dataset.records)
    near = [r for r in dataset.records if math.hypot(r.ic.p2.x - SINGULAR_POINT[0], r.ic.p2.z - SINGULAR_POINT[1]) < radius]
    failed = sum(not r.converged for r in dataset.records)
    near_failed = sum(not r.converged for r in near)
    return {
        "n": n,
        "converged": n - failed,
        "global_failure_rate": failed / n if n else 0.0,
        "near_count": len(near),
        "near_failure_rate": near_failed / len(near) if near else float("nan"),
    }
