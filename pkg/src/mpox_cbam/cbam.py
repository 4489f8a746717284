"""Convolutional block attention: channel gate, then spatial gate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidConfig, ShapeMismatch
from .tensor import Tensor

SPATIAL_KERNEL = 7


@dataclass(frozen=True)
class ChannelAttentionParams:
    """Shared two-layer MLP ``C -> C/r -> C`` applied to pooled descriptors."""

    w0: Tensor
    b0: Tensor
    w1: Tensor
    b1: Tensor
    reduction_ratio: int

    def __post_init__(self):
        hidden, c = self.w0.shape
        if self.reduction_ratio < 1 or c % self.reduction_ratio or c // self.reduction_ratio != hidden:
            raise InvalidConfig(
                f"channel attention for C={c} with ratio {self.reduction_ratio} needs a {c // max(self.reduction_ratio, 1)}-unit hidden layer, got {hidden}"
            )
        if self.b0.shape != (hidden,) or self.w1.shape != (c, hidden) or self.b1.shape != (c,):
            raise ShapeMismatch("channel attention parameter shapes are inconsistent")

    @property
    def channels(self) -> int:
        return self.w0.shape[1]

    @classmethod
    def zeros(cls, channels: int, reduction_ratio: int = 8) -> "ChannelAttentionParams":
        _check_ratio(channels, reduction_ratio)
        hidden = channels // reduction_ratio
        return cls(
            Tensor(np.zeros((hidden, channels))),
            Tensor(np.zeros(hidden)),
            Tensor(np.zeros((channels, hidden))),
            Tensor(np.zeros(channels)),
            reduction_ratio,
        )

    @classmethod
    def init(cls, channels: int, reduction_ratio: int, rng: np.random.Generator) -> "ChannelAttentionParams":
        _check_ratio(channels, reduction_ratio)
        hidden = channels // reduction_ratio
        return cls(
            Tensor(_uniform(rng, (hidden, channels), channels)),
            Tensor(np.zeros(hidden)),
            Tensor(_uniform(rng, (channels, hidden), hidden)),
            Tensor(np.zeros(channels)),
            reduction_ratio,
        )


@dataclass(frozen=True)
class SpatialAttentionParams:
    """A single ``2 -> 1`` convolution over the [avg; max] channel descriptors."""

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kernel.shape != (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL) or self.bias.shape != (1,):
            raise ShapeMismatch(
                f"spatial attention needs a 1x2x7x7 kernel and one bias, got {self.kernel.shape}, {self.bias.shape}"
            )

    @classmethod
    def zeros(cls) -> "SpatialAttentionParams":
        return cls(Tensor(np.zeros((1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL))), Tensor(np.zeros(1)))

    @classmethod
    def init(cls, rng: np.random.Generator) -> "SpatialAttentionParams":
        fan_in = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL
        return cls(Tensor(_uniform(rng, (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), fan_in)), Tensor(np.zeros(1)))


@dataclass(frozen=True)
class AttentionMaps:
    mc: Tensor
    ms: Tensor


def _check_ratio(channels: int, r: int):
    if r < 1 or channels % r:
        raise InvalidConfig(f"reduction ratio {r} must divide the channel count {channels}")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _shared_mlp(d: Tensor, p: ChannelAttentionParams) -> Tensor:
    hidden = T.relu(T.dense(d, p.w0, p.b0))
    return T.dense(hidden, p.w1, p.b1)


def channel_attention(f: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Per-channel gate ``sigmoid(mlp(avgpool f) + mlp(maxpool f))``, shape ``C x 1 x 1``."""
    if f.ndim not in (3, 4) or f.shape[-3] != p.channels:
        raise ShapeMismatch(f"feature map {f.shape} does not have {p.channels} channels")
    avg = _shared_mlp(T.spatial_pool("avg", f), p)
    mx = _shared_mlp(T.spatial_pool("max", f), p)
    return T.sigmoid(T.add(avg, mx))


def spatial_attention(f: Tensor, p: SpatialAttentionParams) -> Tensor:
    """Per-position gate from a 7x7 conv over channel-pooled maps, shape ``1 x H x W``."""
    if f.ndim not in (3, 4):
        raise ShapeMismatch(f"spatial attention expects a feature map, got {f.shape}")
    desc = T.concat([T.channel_pool("avg", f), T.channel_pool("max", f)], axis=-3)
    return T.sigmoid(T.conv2d(desc, p.kernel, p.bias, padding=SPATIAL_KERNEL // 2, stride=1))


def cbam_refine(f: Tensor, cp: ChannelAttentionParams, sp: SpatialAttentionParams, return_maps: bool = False):
    """Refine ``f`` with the channel gate, then gate the result spatially.

    The spatial map is computed from the channel-refined map, not from ``f``.
    With ``return_maps=True`` also returns the :class:`AttentionMaps`.
    """
    mc = channel_attention(f, cp)
    f1 = T.mul(f, mc)
    ms = spatial_attention(f1, sp)
    f2 = T.mul(f1, ms)
    if return_maps:
        return f2, AttentionMaps(mc, ms)
    return f2
