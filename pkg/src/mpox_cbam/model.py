"""Backbone -> CBAM -> Dense(256) -> Dense(128) -> Flatten -> Dense(1) classifier."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .cbam import ChannelAttentionParams, SpatialAttentionParams, cbam_refine
from .errors import InvalidConfig, ShapeMismatch
from .tensor import Tensor

HEAD_UNITS = (256, 128)


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    pool: str = "max2"

    def __post_init__(self):
        if self.out_channels < 1:
            raise InvalidConfig(f"out_channels must be >= 1, got {self.out_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidConfig(f"kernel_size must be odd, got {self.kernel_size}")
        if self.stride < 1:
            raise InvalidConfig(f"stride must be >= 1, got {self.stride}")
        if self.pool not in ("none", "max2"):
            raise InvalidConfig(f"pool must be 'none' or 'max2', got {self.pool!r}")


@dataclass(frozen=True)
class BackboneConfig:
    """Stand-in feature extractor: a stack of conv -> ReLU -> optional 2x2 max-pool blocks."""

    blocks: tuple[ConvBlock, ...]
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not blocks:
            raise InvalidConfig("backbone needs at least one block")
        if len(self.input_shape) != 3 or self.input_shape[0] != 3:
            raise InvalidConfig(f"input_shape must be 3 x H x W, got {self.input_shape}")
        self.feature_shape  # validates extents

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        _, h, w = self.input_shape
        c = 3
        for i, b in enumerate(self.blocks):
            pad = b.kernel_size // 2
            h = (h + 2 * pad - b.kernel_size) // b.stride + 1
            w = (w + 2 * pad - b.kernel_size) // b.stride + 1
            if b.pool == "max2":
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise InvalidConfig(f"block {i} shrinks the {self.input_shape[1]}x{self.input_shape[2]} input to nothing")
            c = b.out_channels
        return c, h, w

    def with_input_size(self, height: int, width: int) -> "BackboneConfig":
        return BackboneConfig(self.blocks, (3, height, width))

    def to_dict(self) -> dict:
        return {
            "blocks": [[b.out_channels, b.kernel_size, b.stride, b.pool] for b in self.blocks],
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        return cls(tuple(ConvBlock(*b) for b in d["blocks"]), tuple(d["input_shape"]))


def block_parameter_names(index: int) -> tuple[str, str]:
    return f"backbone.{index}.kernel", f"backbone.{index}.bias"


def default_freeze(cfg: BackboneConfig) -> frozenset[str]:
    """Freeze every backbone block except the last two; attention and head stay trainable."""
    names = []
    for i in range(max(len(cfg.blocks) - 2, 0)):
        names.extend(block_parameter_names(i))
    return frozenset(names)


@dataclass
class ModelAssembly:
    config: BackboneConfig
    reduction_ratio: int
    seed: int
    params: dict[str, Tensor]
    frozen: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        self.set_freeze(self.frozen)

    # -- freezing -----------------------------------------------------------

    def set_freeze(self, names: Iterable[str]) -> "ModelAssembly":
        names = frozenset(names)
        unknown = names - self.params.keys()
        if unknown:
            raise InvalidConfig(f"freeze mask names unknown parameters: {sorted(unknown)}")
        self.frozen = names
        return self

    def freeze_all(self) -> "ModelAssembly":
        return self.set_freeze(self.params)

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def trainable_parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.trainable_names()]

    def parameter_count(self) -> tuple[int, int]:
        total = sum(p.size for p in self.params.values())
        trainable = sum(self.params[n].size for n in self.trainable_names())
        return total, trainable

    def block_parameter_count(self, index: int) -> int:
        return sum(self.params[n].size for n in block_parameter_names(index))

    # -- inference ----------------------------------------------------------

    def forward(self, batch, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Probabilities of the positive class for an ``N x 3 x H x W`` batch."""
        p = self.params if params is None else params
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise ShapeMismatch(f"expected a batch of shape N x {self.config.input_shape}, got {x.shape}")
        for i, b in enumerate(self.config.blocks):
            k, bias = (p[n] for n in block_parameter_names(i))
            x = T.relu(T.conv2d(x, k, bias, padding=b.kernel_size // 2, stride=b.stride))
            if b.pool == "max2":
                x = T.max_pool2d(x, 2)
        cp = ChannelAttentionParams(p["cbam.channel.w0"], p["cbam.channel.b0"], p["cbam.channel.w1"],
                                    p["cbam.channel.b1"], self.reduction_ratio)
        sp = SpatialAttentionParams(p["cbam.spatial.kernel"], p["cbam.spatial.bias"])
        x = cbam_refine(x, cp, sp)
        x = T.relu(T.dense(x, p["head.dense256.weight"], p["head.dense256.bias"]))
        x = T.relu(T.dense(x, p["head.dense128.weight"], p["head.dense128.bias"]))
        x = T.flatten(x, start=1)
        logit = T.dense(x, p["head.out.weight"], p["head.out.bias"])
        return T.flatten(T.sigmoid(logit))

    def predict_proba(self, X, batch_size: int = 256) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = [self.forward(X[i : i + batch_size]).data for i in range(0, len(X), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.numpy() for n, t in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]):
        if list(state) != list(self.params):
            raise ShapeMismatch("parameter names do not match this model")
        for n, v in state.items():
            if np.shape(v) != self.params[n].shape:
                raise ShapeMismatch(f"{n}: expected shape {self.params[n].shape}, got {np.shape(v)}")
            self.params[n] = Tensor(v)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def build_model(cfg: BackboneConfig, reduction_ratio: int = 8, seed: int = 0,
                freeze: Iterable[str] | None = None) -> ModelAssembly:
    """Initialise a model deterministically from ``seed``.

    Weights are drawn uniformly from +-1/sqrt(fan_in); biases start at zero.
    ``freeze=None`` applies :func:`default_freeze`. A dry-run forward on a zero
    image checks that all shapes line up.
    """
    c, h, w = cfg.feature_shape
    if reduction_ratio < 1 or c % reduction_ratio:
        raise InvalidConfig(f"final channel count {c} is not divisible by reduction ratio {reduction_ratio}")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    c_in = cfg.input_shape[0]
    for i, b in enumerate(cfg.blocks):
        fan_in = c_in * b.kernel_size**2
        kname, bname = block_parameter_names(i)
        params[kname] = _uniform(rng, (b.out_channels, c_in, b.kernel_size, b.kernel_size), fan_in)
        params[bname] = Tensor(np.zeros(b.out_channels))
        c_in = b.out_channels
    ca = ChannelAttentionParams.init(c, reduction_ratio, rng)
    sa = SpatialAttentionParams.init(rng)
    params.update({
        "cbam.channel.w0": ca.w0, "cbam.channel.b0": ca.b0,
        "cbam.channel.w1": ca.w1, "cbam.channel.b1": ca.b1,
        "cbam.spatial.kernel": sa.kernel, "cbam.spatial.bias": sa.bias,
    })
    fan_in = c
    for units, label in zip(HEAD_UNITS, ("dense256", "dense128")):
        params[f"head.{label}.weight"] = _uniform(rng, (units, fan_in), fan_in)
        params[f"head.{label}.bias"] = Tensor(np.zeros(units))
        fan_in = units
    flat = HEAD_UNITS[-1] * h * w
    params["head.out.weight"] = _uniform(rng, (1, flat), flat)
    params["head.out.bias"] = Tensor(np.zeros(1))
    for name, t in params.items():
        t.name = name

    model = ModelAssembly(cfg, reduction_ratio, seed, params,
                          default_freeze(cfg) if freeze is None else frozenset(freeze))
    model.forward(np.zeros((1,) + cfg.input_shape))
    return model


def forward(m: ModelAssembly, batch) -> Tensor:
    return m.forward(batch)
