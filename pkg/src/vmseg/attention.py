"""Squeeze-and-excitation and CBAM attention blocks built from tensor primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Parameter,
    Tensor,
    activation,
    add,
    broadcast_mul,
    channel_pool,
    concat_channels,
    conv2d,
    fully_connected,
    global_pool,
)

DEFAULT_REDUCTION = 16
DEFAULT_SPATIAL_KERNEL = 7


def effective_reduction(channels: int, reduction: int = DEFAULT_REDUCTION) -> int:
    """Clamp ``reduction`` to ``channels`` and check it divides them."""
    if channels < 1 or reduction < 1:
        raise ConfigError(f"channels ({channels}) and reduction ({reduction}) must be >= 1")
    r = min(reduction, channels)
    if channels % r:
        raise ConfigError(f"reduction {r} does not divide {channels} channels")
    return r


def _init(rng, shape, fan_in, gain=1.0):
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


@dataclass
class SeParams:
    channels: int
    reduction: int
    w1: Parameter  # (C/r) x C
    w2: Parameter  # C x (C/r)

    @classmethod
    def create(cls, channels: int, reduction: int = DEFAULT_REDUCTION, *, rng=None, prefix: str = "se"):
        r = effective_reduction(channels, reduction)
        hidden = channels // r
        rng = rng if rng is not None else np.random.default_rng(0)
        w1 = Parameter(_init(rng, (hidden, channels), channels, np.sqrt(2.0)), f"{prefix}.w1")
        w2 = Parameter(_init(rng, (channels, hidden), hidden), f"{prefix}.w2")
        return cls(channels, r, w1, w2)

    @property
    def parameters(self) -> list[Parameter]:
        return [self.w1, self.w2]


@dataclass
class CbamParams:
    channels: int
    reduction: int
    kernel_size: int
    w1: Parameter  # (C/r) x C, shared by the avg and max paths
    w2: Parameter  # C x (C/r)
    spatial_weight: Parameter  # 1 x 2 x k x k over (avg, max)
    spatial_bias: Parameter  # (1,)

    @classmethod
    def create(cls, channels: int, reduction: int = DEFAULT_REDUCTION,
               kernel_size: int = DEFAULT_SPATIAL_KERNEL, *, rng=None, prefix: str = "cbam"):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"spatial kernel size must be odd and >= 1, got {kernel_size}")
        r = effective_reduction(channels, reduction)
        hidden = channels // r
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        return cls(
            channels, r, k,
            Parameter(_init(rng, (hidden, channels), channels, np.sqrt(2.0)), f"{prefix}.w1"),
            Parameter(_init(rng, (channels, hidden), hidden), f"{prefix}.w2"),
            Parameter(_init(rng, (1, 2, k, k), 2 * k * k), f"{prefix}.spatial.weight"),
            Parameter(np.zeros(1), f"{prefix}.spatial.bias"),
        )

    @property
    def parameters(self) -> list[Parameter]:
        return [self.w1, self.w2, self.spatial_weight, self.spatial_bias]


def _check_channels(f: Tensor, channels: int) -> None:
    c = f.shape[-3] if f.ndim >= 3 else None
    if f.ndim not in (3, 4) or c != channels:
        raise DimensionError(f"attention block expects {channels} channels, got shape {f.shape}")


def _excite(z: Tensor, w1: Parameter, w2: Parameter) -> Tensor:
    return fully_connected(activation(fully_connected(z, w1), "relu"), w2)


def se_forward(f: Tensor, p: SeParams) -> Tensor:
    """Rescale each channel by sigmoid(W2 relu(W1 mean_hw(F)))."""
    _check_channels(f, p.channels)
    z = global_pool(f, "avg")
    s = activation(_excite(z, p.w1, p.w2), "sigmoid")
    return broadcast_mul(f, s)


def channel_attention_weights(f: Tensor, p: CbamParams) -> Tensor:
    _check_channels(f, p.channels)
    avg_path = _excite(global_pool(f, "avg"), p.w1, p.w2)
    max_path = _excite(global_pool(f, "max"), p.w1, p.w2)
    return activation(add(avg_path, max_path), "sigmoid")


def spatial_attention_map(f: Tensor, p: CbamParams) -> Tensor:
    pooled = concat_channels(channel_pool(f, "avg"), channel_pool(f, "max"))
    logits = conv2d(pooled, p.spatial_weight, p.spatial_bias, stride=1, padding=(p.kernel_size - 1) // 2)
    return activation(logits, "sigmoid")


def cbam_forward(f: Tensor, p: CbamParams) -> Tensor:
    """Channel gate first, then a spatial gate computed from the channel-refined map."""
    refined = broadcast_mul(f, channel_attention_weights(f, p))
    return broadcast_mul(refined, spatial_attention_map(refined, p))
