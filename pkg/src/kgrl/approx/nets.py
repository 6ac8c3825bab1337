"""Layer specs, initializers and the functional forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kgrl.approx import tensor as T
from kgrl.approx.params import ParameterStore
from kgrl.approx.tensor import ShapeError, Tensor

ACTIVATIONS = ("relu", "tanh", "none")


def _check_activation(act: str) -> None:
    if act not in ACTIVATIONS:
        raise ValueError(f"activation {act!r} not in {ACTIVATIONS}")


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden: tuple[tuple[int, str], ...]
    output_dim: int
    activation: str = "none"  # applied to the output layer

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(tuple(h) for h in self.hidden))
        for width, act in self.hidden:
            if width < 1:
                raise ValueError("hidden widths must be >= 1")
            _check_activation(act)
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input/output dims must be >= 1")
        _check_activation(self.activation)

    def layer_dims(self) -> list[tuple[int, int, str]]:
        dims = [self.input_dim] + [w for w, _ in self.hidden] + [self.output_dim]
        acts = [a for _, a in self.hidden] + [self.activation]
        return [(dims[i], dims[i + 1], acts[i]) for i in range(len(acts))]


@dataclass(frozen=True)
class ConvLayer:
    filters: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class ConvEncoderSpec:
    in_channels: int
    height: int
    width: int
    layers: tuple[ConvLayer, ...] = (ConvLayer(16, 2), ConvLayer(32, 2), ConvLayer(64, 2))
    head_width: int = 64
    head_activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(
            self, "layers", tuple(l if isinstance(l, ConvLayer) else ConvLayer(*l) for l in self.layers)
        )
        if len(self.layers) != 3:
            raise ValueError("conv encoder needs exactly 3 conv layers")
        _check_activation(self.head_activation)
        self.conv_output_shape()  # raises if the kernels do not fit

    def conv_output_shape(self) -> tuple[int, int, int]:
        c, h, w = self.in_channels, self.height, self.width
        for layer in self.layers:
            h = (h - layer.kernel) // layer.stride + 1
            w = (w - layer.kernel) // layer.stride + 1
            c = layer.filters
            if h < 1 or w < 1:
                raise ValueError("conv stack does not fit the input size")
        return c, h, w

    @property
    def flat_dim(self) -> int:
        c, h, w = self.conv_output_shape()
        return c * h * w

    @property
    def output_dim(self) -> int:
        return self.head_width


@dataclass
class EmbeddingTable:
    """Rows are knowledge keys; ``param`` is the store entry holding them."""

    rows: int
    dim: int
    param: str = "keys"
    names: list[str] = field(default_factory=list)


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _gain(act: str) -> float:
    return np.sqrt(2.0) if act == "relu" else 1.0


def unit_sphere_rows(rows: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((rows, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def init_mlp(spec: MLPSpec, store: ParameterStore, prefix: str, rng: np.random.Generator) -> None:
    last = len(spec.layer_dims()) - 1
    for i, (din, dout, act) in enumerate(spec.layer_dims()):
        gain = 1.0 if i == last else _gain(act)
        store.add(f"{prefix}.l{i}.w", orthogonal((din, dout), gain, rng))
        store.add(f"{prefix}.l{i}.b", np.zeros(dout))


def init_conv(spec: ConvEncoderSpec, store: ParameterStore, prefix: str, rng: np.random.Generator) -> None:
    cin = spec.in_channels
    for i, layer in enumerate(spec.layers):
        fan = cin * layer.kernel * layer.kernel
        w = orthogonal((layer.filters, fan), np.sqrt(2.0), rng)
        store.add(f"{prefix}.c{i}.w", w.reshape(layer.filters, cin, layer.kernel, layer.kernel))
        store.add(f"{prefix}.c{i}.b", np.zeros(layer.filters))
        cin = layer.filters
    store.add(f"{prefix}.fc.w", orthogonal((spec.flat_dim, spec.head_width), _gain(spec.head_activation), rng))
    store.add(f"{prefix}.fc.b", np.zeros(spec.head_width))


def init_embedding(table: EmbeddingTable, store: ParameterStore, rng: np.random.Generator) -> None:
    store.add(table.param, unit_sphere_rows(table.rows, table.dim, rng))


def activate(x: Tensor, act: str) -> Tensor:
    if act == "relu":
        return T.relu(x)
    if act == "tanh":
        return T.tanh(x)
    return x


def forward(spec, params: ParameterStore, x, prefix: str) -> Tensor:
    """Run an MLP or conv encoder stored under ``prefix`` on a batch."""
    x = T.as_tensor(x)
    if isinstance(spec, MLPSpec):
        if x.ndim < 1 or x.shape[-1] != spec.input_dim:
            raise ShapeError(f"{prefix}: expected last dim {spec.input_dim}, got {x.shape}")
        for i, (_, _, act) in enumerate(spec.layer_dims()):
            x = activate(x @ params[f"{prefix}.l{i}.w"] + params[f"{prefix}.l{i}.b"], act)
        return x
    if isinstance(spec, ConvEncoderSpec):
        x = conv_features(spec, params, x, prefix)
        return activate(x @ params[f"{prefix}.fc.w"] + params[f"{prefix}.fc.b"], spec.head_activation)
    raise TypeError(f"unsupported spec {type(spec).__name__}")


def conv_features(spec: ConvEncoderSpec, params: ParameterStore, x, prefix: str) -> Tensor:
    """The flattened output of the three conv layers (before the dense head)."""
    x = T.as_tensor(x)
    want = (spec.in_channels, spec.height, spec.width)
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise ShapeError(f"{prefix}: expected (N, {want}), got {x.shape}")
    for i, layer in enumerate(spec.layers):
        x = T.relu(T.conv2d(x, params[f"{prefix}.c{i}.w"], params[f"{prefix}.c{i}.b"], layer.stride))
    return x.reshape(x.shape[0], -1)
