"""Dense and residual MLPs over a flat parameter vector.

There are two evaluation routes over the same parameters:

* a scalar route on the autodiff tape (:func:`tape_forward`), which is the
  reference implementation and is differentiable in any direction, and
* a batched numpy route (:func:`batch_forward` / :func:`batch_backward`) with
  hand-written forward tangents and reverse sweep, used for training.

Tests hold the two routes against each other and against finite differences.

Layouts are row-major: each layer stores its ``(fan_out, fan_in)`` weight
matrix followed by its bias.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DimensionError

__all__ = [
    "Architecture",
    "Activation",
    "Formulation",
    "NetworkConfig",
    "LayerSpec",
    "ParameterStore",
    "build_layout",
    "parameter_count",
    "init_network",
    "forward",
    "forward_with_time_derivative",
    "tape_forward",
    "tape_forward_with_time_derivative",
    "batch_forward",
    "batch_backward",
    "activate",
    "OUTPUT_DIM",
]

OUTPUT_DIM = 12


class Architecture(enum.Enum):
    DNN = "dnn"
    RESNET = "resnet"


class Activation(enum.Enum):
    RELU = "relu"
    GELU = "gelu"
    TANH = "tanh"
    LEAKY_RELU = "leaky_relu"


class Formulation(enum.Enum):
    NON_AUTOREGRESSIVE = "nar"
    AUTOREGRESSIVE = "ar"


def _coerce(enum_type, value):
    if isinstance(value, enum_type):
        return value
    key = str(value).lower().replace("-", "_")
    for member in enum_type:
        if key in (member.value, member.name.lower()):
            return member
    raise ValueError(f"unknown {enum_type.__name__}: {value!r}")


@dataclass(frozen=True)
class NetworkConfig:
    """Network shape.

    For ``DNN`` ``depth`` counts hidden layers. For ``ResNet`` it counts the
    hidden layers inside residual blocks (two per block), so it must be even;
    an input projection and an output projection come on top.
    """

    architecture: Architecture = Architecture.RESNET
    depth: int = 12
    width: int = 256
    activation: Activation = Activation.RELU
    formulation: Formulation = Formulation.NON_AUTOREGRESSIVE

    def __post_init__(self):
        object.__setattr__(self, "architecture", _coerce(Architecture, self.architecture))
        object.__setattr__(self, "activation", _coerce(Activation, self.activation))
        object.__setattr__(self, "formulation", _coerce(Formulation, self.formulation))
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be at least 1")
        if self.architecture is Architecture.RESNET and self.depth % 2:
            raise ValueError("ResNet depth must be even (two layers per block)")

    @property
    def input_dim(self) -> int:
        return 7 if self.formulation is Formulation.NON_AUTOREGRESSIVE else 13

    @property
    def output_dim(self) -> int:
        return OUTPUT_DIM

    @property
    def time_index(self) -> int:
        """Input position of ``t`` (or of the step ``dt`` when autoregressive)."""
        return self.input_dim - 1


class LayerSpec(NamedTuple):
    fan_in: int
    fan_out: int
    w_offset: int
    b_offset: int
    activated: bool
    # index of the layer whose output is added before this layer's activation
    skip_from: int | None


def build_layout(config: NetworkConfig) -> tuple[LayerSpec, ...]:
    dims: list[tuple[int, int, bool, int | None]] = []
    w = config.width
    if config.architecture is Architecture.DNN:
        dims.append((config.input_dim, w, True, None))
        dims.extend((w, w, True, None) for _ in range(config.depth - 1))
    else:
        dims.append((config.input_dim, w, True, None))
        for _ in range(config.depth // 2):
            block_input = len(dims) - 1
            dims.append((w, w, True, None))
            dims.append((w, w, True, block_input))
    dims.append((w, OUTPUT_DIM, False, None))
    layout = []
    off = 0
    for fan_in, fan_out, act, skip in dims:
        layout.append(LayerSpec(fan_in, fan_out, off, off + fan_in * fan_out, act, skip))
        off += fan_in * fan_out + fan_out
    return tuple(layout)


def parameter_count(config: NetworkConfig) -> int:
    last = build_layout(config)[-1]
    return last.b_offset + last.fan_out


@dataclass(frozen=True, eq=False)
class ParameterStore:
    values: np.ndarray
    config: NetworkConfig
    layout: tuple[LayerSpec, ...] = field(init=False)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != parameter_count(self.config):
            raise DimensionError(f"expected {parameter_count(self.config)} parameters, got {values.size}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", build_layout(self.config))

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParameterStore):
            return NotImplemented
        return self.config == other.config and np.array_equal(self.values, other.values)

    def weight(self, i: int) -> np.ndarray:
        spec = self.layout[i]
        return self.values[spec.w_offset : spec.b_offset].reshape(spec.fan_out, spec.fan_in)

    def bias(self, i: int) -> np.ndarray:
        spec = self.layout[i]
        return self.values[spec.b_offset : spec.b_offset + spec.fan_out]

    def with_values(self, values: np.ndarray) -> "ParameterStore":
        return ParameterStore(values, self.config)


def init_network(config: NetworkConfig, seed: int) -> ParameterStore:
    """He-uniform weights for the ReLU family and GELU, Xavier-uniform for tanh; zero biases."""
    rng = np.random.default_rng(seed)
    layout = build_layout(config)
    values = np.zeros(parameter_count(config))
    for spec in layout:
        if config.activation is Activation.TANH:
            bound = math.sqrt(6.0 / (spec.fan_in + spec.fan_out))
        else:
            bound = math.sqrt(6.0 / spec.fan_in)
        values[spec.w_offset : spec.b_offset] = rng.uniform(-bound, bound, spec.fan_in * spec.fan_out)
    return ParameterStore(values, config)


# --- scalar route -----------------------------------------------------------

_SCALAR_ACT = {
    Activation.RELU: ad.relu,
    Activation.GELU: ad.gelu,
    Activation.TANH: ad.tanh,
    Activation.LEAKY_RELU: ad.leaky_relu,
}


def _check_input(config: NetworkConfig, n: int):
    if n != config.input_dim:
        raise DimensionError(f"input has length {n}, expected {config.input_dim}")


def tape_forward(weights: Sequence, config: NetworkConfig, inputs: Sequence) -> list:
    """Evaluate the network with scalar autodiff ops.

    ``weights`` is a flat sequence of ``Var`` or floats; ``inputs`` may hold
    floats, ``Var`` or ``DualVar``. Returns the 12 outputs.
    """
    _check_input(config, len(inputs))
    layout = build_layout(config)
    if len(weights) != parameter_count(config):
        raise DimensionError("weight vector length does not match config")
    act = _SCALAR_ACT[config.activation]
    outputs: list[list] = []
    h = list(inputs)
    for spec in layout:
        nxt = []
        for o in range(spec.fan_out):
            row = weights[spec.w_offset + o * spec.fan_in : spec.w_offset + (o + 1) * spec.fan_in]
            z = ad.dot(row, h, weights[spec.b_offset + o])
            if spec.skip_from is not None:
                z = z + outputs[spec.skip_from][o]
            nxt.append(act(z) if spec.activated else z)
        outputs.append(nxt)
        h = nxt
    return h


def tape_forward_with_time_derivative(weights: Sequence, config: NetworkConfig, inputs: Sequence, time_index: int | None = None):
    """Outputs and their derivatives with respect to ``inputs[time_index]``, all on the tape."""
    _check_input(config, len(inputs))
    ti = config.time_index if time_index is None else time_index
    if not 0 <= ti < config.input_dim:
        raise DimensionError(f"time_index {ti} out of range")
    duals = [ad.DualVar(x, 1.0 if i == ti else 0.0) for i, x in enumerate(inputs)]
    out = tape_forward(weights, config, duals)
    primal = [o.primal if isinstance(o, ad.DualVar) else o for o in out]
    tangent = [o.tangent if isinstance(o, ad.DualVar) else 0.0 for o in out]
    return primal, tangent


# --- batched route ----------------------------------------------------------


def activate(kind: Activation, z: np.ndarray, order: int = 1):
    """Return ``(act(z), act'(z), act''(z))``, the last only when ``order >= 2``."""
    if kind is Activation.RELU:
        on = z > 0
        a = np.where(on, z, 0.0)
        return a, on.astype(np.float64), (np.zeros_like(z) if order >= 2 else None)
    if kind is Activation.LEAKY_RELU:
        s = np.where(z > 0, 1.0, ad.LEAKY_SLOPE)
        return z * s, s, (np.zeros_like(z) if order >= 2 else None)
    if kind is Activation.TANH:
        y = np.tanh(z)
        s = 1.0 - y * y
        return y, s, (-2.0 * y * s if order >= 2 else None)
    # GELU, tanh approximation
    c, k = ad.GELU_C, ad.GELU_K
    z2 = z * z
    u = c * (z + k * z2 * z)
    th = np.tanh(u)
    sech2 = 1.0 - th * th
    du = c * (1.0 + 3.0 * k * z2)
    a = 0.5 * z * (1.0 + th)
    s = 0.5 * (1.0 + th) + 0.5 * z * sech2 * du
    s2 = None
    if order >= 2:
        s2 = sech2 * du + 0.5 * z * sech2 * (6.0 * c * k * z - 2.0 * th * du * du)
    return a, s, s2


class _Cache(NamedTuple):
    inputs: list  # per layer: its input activations (B, fan_in)
    tangents_in: list  # per layer: input tangents or None
    slopes: list  # act' at the pre-activation, or None for linear layers
    curvatures: list  # act'' times the pre-activation tangent, or None
    time_index: int | None


class BatchResult(NamedTuple):
    outputs: np.ndarray
    tangents: np.ndarray | None
    cache: _Cache


def batch_forward(params: ParameterStore, X: np.ndarray, time_index: int | None = None, *, keep: bool = True) -> BatchResult:
    """Forward pass over a batch ``X`` of shape ``(B, input_dim)``.

    With ``time_index`` the tangent ``dY/dX[:, time_index]`` is propagated
    alongside. ``keep`` retains what :func:`batch_backward` needs.
    """
    cfg = params.config
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise DimensionError(f"batch must have shape (B, {cfg.input_dim}), got {X.shape}")
    want_tangent = time_index is not None
    if want_tangent and not 0 <= time_index < cfg.input_dim:
        raise DimensionError(f"time_index {time_index} out of range")
    a = X
    da = None
    outs: list[np.ndarray] = []
    douts: list[np.ndarray | None] = []
    c_in, c_tin, c_s, c_k = [], [], [], []
    for li, spec in enumerate(params.layout):
        W = params.weight(li)
        z = a @ W.T + params.bias(li)
        dz = None
        if want_tangent:
            dz = np.broadcast_to(W[:, time_index], z.shape).copy() if li == 0 else da @ W.T
        if spec.skip_from is not None:
            z += outs[spec.skip_from]
            if want_tangent:
                dz += douts[spec.skip_from]
        if keep:
            c_in.append(a)
            c_tin.append(da)
        if spec.activated:
            a, s, s2 = activate(cfg.activation, z, order=2 if want_tangent else 1)
            if want_tangent:
                da = s * dz
            if keep:
                c_s.append(s)
                c_k.append(s2 * dz if want_tangent else None)
        else:
            a, da = z, dz
            if keep:
                c_s.append(None)
                c_k.append(None)
        outs.append(a)
        douts.append(da)
    return BatchResult(a, da, _Cache(c_in, c_tin, c_s, c_k, time_index))


def batch_backward(params: ParameterStore, result: BatchResult, grad_outputs: np.ndarray | None, grad_tangents: np.ndarray | None = None) -> np.ndarray:
    """Flat gradient of ``sum(grad_outputs * Y) + sum(grad_tangents * dY)``."""
    cache = result.cache
    layout = params.layout
    if grad_tangents is not None and cache.time_index is None:
        raise ValueError("tangent adjoints need a forward pass with time_index")
    B = result.outputs.shape[0]
    g_a = np.zeros((B, OUTPUT_DIM)) if grad_outputs is None else np.asarray(grad_outputs, dtype=np.float64)
    g_da = None if grad_tangents is None else np.asarray(grad_tangents, dtype=np.float64)
    grad = np.zeros(params.values.size)
    pending: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}
    for li in range(len(layout) - 1, -1, -1):
        spec = layout[li]
        if li in pending:
            pa, pda = pending.pop(li)
            g_a = g_a + pa
            if pda is not None:
                g_da = pda if g_da is None else g_da + pda
        s = cache.slopes[li]
        if s is None:
            g_z, g_dz = g_a, g_da
        else:
            g_z = g_a * s
            if g_da is not None:
                g_z = g_z + g_da * cache.curvatures[li]
                g_dz = g_da * s
            else:
                g_dz = None
        if spec.skip_from is not None:
            pending[spec.skip_from] = (g_z, g_dz)
        W = params.weight(li)
        a_in = cache.inputs[li]
        gW = g_z.T @ a_in
        if g_dz is not None:
            if li == 0:
                gW[:, cache.time_index] += g_dz.sum(axis=0)
            else:
                gW += g_dz.T @ cache.tangents_in[li]
        grad[spec.w_offset : spec.b_offset] = gW.ravel()
        grad[spec.b_offset : spec.b_offset + spec.fan_out] = g_z.sum(axis=0)
        if li > 0:
            g_a = g_z @ W
            g_da = g_dz @ W if g_dz is not None else None
    return grad


# --- convenience single-sample wrappers ---------------------------------------


def _as_store(params, config: NetworkConfig) -> ParameterStore:
    if isinstance(params, ParameterStore):
        if params.config != config:
            raise DimensionError("parameter store was built for a different config")
        return params
    return ParameterStore(np.asarray(params, dtype=np.float64), config)


def forward(params, config: NetworkConfig, x) -> np.ndarray:
    """Network output for one input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("forward takes a single input vector")
    _check_input(config, x.size)
    return batch_forward(_as_store(params, config), x[None, :], keep=False).outputs[0]


def forward_with_time_derivative(params, config: NetworkConfig, x, time_index: int | None = None):
    """``(y, dy/dx[time_index])`` for one input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("forward takes a single input vector")
    _check_input(config, x.size)
    ti = config.time_index if time_index is None else time_index
    res = batch_forward(_as_store(params, config), x[None, :], ti, keep=False)
    return res.outputs[0], res.tangents[0]
