"""Network layouts shared by live actors and frozen knowledge snapshots.

Parameter names are fixed so a snapshot can be cut out of a live store by
prefix: ``enc.*`` + ``pi.*`` is a grid inner policy, ``pi.*`` alone is a
continuous one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from kgrl import grid_env
from kgrl.approx import ConvEncoderSpec, MLPSpec, ParameterStore, conv_features, forward, init_conv, init_mlp
from kgrl.approx import tensor as T
from kgrl.approx.tensor import Tensor

GRID_LAYOUT = "grid5x5-onehot-v1"
POINT_LAYOUT = "point25-v1"
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0


@dataclass(frozen=True)
class GridArch:
    hidden: int = 64
    filters: tuple[int, int, int] = (16, 32, 64)
    kernel: int = 2

    @property
    def encoder(self) -> ConvEncoderSpec:
        return ConvEncoderSpec(
            in_channels=grid_env.N_CHANNELS,
            height=grid_env.VIEW,
            width=grid_env.VIEW,
            layers=tuple((f, self.kernel, 1) for f in self.filters),
            head_width=self.hidden,
            head_activation="tanh",
        )

    def head(self, out_dim: int) -> MLPSpec:
        return MLPSpec(self.hidden, (), out_dim)

    @property
    def critic(self) -> MLPSpec:
        return MLPSpec(self.encoder.flat_dim, ((self.hidden, "tanh"),), 1)

    def to_dict(self) -> dict:
        return {"type": "grid", **asdict(self)}


@dataclass(frozen=True)
class PointArch:
    obs_dim: int = 25
    act_dim: int = 4
    hidden: tuple[int, ...] = (64, 64)
    key_hidden: tuple[int, ...] = (32,)
    obs_scale: float = 5.0  # positions are O(0.1 m); scale to O(1) before the first layer

    @property
    def inner(self) -> MLPSpec:
        return MLPSpec(self.obs_dim, tuple((h, "relu") for h in self.hidden), 2 * self.act_dim)

    def key_net(self, d_k: int) -> MLPSpec:
        return MLPSpec(self.obs_dim, tuple((h, "relu") for h in self.key_hidden), d_k)

    @property
    def critic(self) -> MLPSpec:
        return MLPSpec(self.obs_dim + self.act_dim, tuple((h, "relu") for h in self.hidden), 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"type": "point", **d}


def arch_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    if kind == "grid":
        d["filters"] = tuple(d["filters"])
        return GridArch(**d)
    if kind == "point":
        d["hidden"] = tuple(d["hidden"])
        d["key_hidden"] = tuple(d["key_hidden"])
        return PointArch(**d)
    raise ValueError(f"unknown architecture type {kind!r}")


def init_grid_inner(arch: GridArch, store: ParameterStore, rng: np.random.Generator) -> None:
    init_conv(arch.encoder, store, "enc", rng)
    init_mlp(arch.head(grid_env.N_ACTIONS), store, "pi", rng)


def grid_trunk(arch: GridArch, params: ParameterStore, x) -> tuple[Tensor, Tensor]:
    """Returns (conv features, tanh hidden features) for a (N, C, 5, 5) batch."""
    feats = conv_features(arch.encoder, params, x, "enc")
    hidden = T.tanh(feats @ params["enc.fc.w"] + params["enc.fc.b"])
    return feats, hidden


def grid_inner_logp(arch: GridArch, params: ParameterStore, hidden: Tensor) -> Tensor:
    return T.log_softmax(forward(arch.head(grid_env.N_ACTIONS), params, hidden, "pi"), axis=-1)


def init_point_inner(arch: PointArch, store: ParameterStore, rng: np.random.Generator) -> None:
    init_mlp(arch.inner, store, "pi", rng)


def point_inner(arch: PointArch, params: ParameterStore, obs) -> tuple[Tensor, Tensor]:
    """Pre-squash Gaussian (mean, log_std), log_std clamped to [-20, 2]."""
    out = forward(arch.inner, params, T.as_tensor(obs) * arch.obs_scale, "pi")
    mean = out[:, : arch.act_dim]
    log_std = T.clip(out[:, arch.act_dim :], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std
