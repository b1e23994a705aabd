"""Encoder-decoder segmentation network with optional per-stage attention.

Three variants share one topology:

* ``baseline`` - plain encoder/decoder with skip connections,
* ``se``       - a squeeze-and-excitation block after every encoder and decoder stage,
* ``cbam``     - a CBAM block in the same places.

Stage ``i`` works at ``base_channels * 2**i`` channels and ``H / 2**i``
resolution. Encoder stages are two 3x3 conv+ReLU layers followed by a
stride-2 3x3 conv (or 2x2 max pool) to go down; decoder stages upsample with a
2x2 stride-2 transposed conv, join the skip tensor and run two more conv+ReLU
layers. A 1x1 conv and sigmoid produce the probability map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .attention import (
    DEFAULT_REDUCTION,
    DEFAULT_SPATIAL_KERNEL,
    CbamParams,
    SeParams,
    cbam_forward,
    se_forward,
)
from .datapipe import binarize_mask
from .errors import ConfigError, DimensionError
from .tensor import (
    Parameter,
    Tensor,
    activation,
    add,
    as_tensor,
    concat_channels,
    conv2d,
    max_pool2x2,
    no_grad,
    transposed_conv2d,
)

VARIANTS = ("baseline", "se", "cbam")


@dataclass
class NetConfig:
    variant: str = "se"
    depth: int = 2
    base_channels: int = 8
    in_channels: int = 1
    reduction: int = DEFAULT_REDUCTION
    spatial_kernel: int = DEFAULT_SPATIAL_KERNEL
    skip_mode: str = "concat"
    downsample: str = "conv"
    attend_encoder: bool = True
    attend_decoder: bool = True
    seed: int = 0

    def validate(self) -> "NetConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.skip_mode not in ("concat", "add"):
            raise ConfigError(f"skip_mode must be 'concat' or 'add', got {self.skip_mode!r}")
        if self.downsample not in ("conv", "maxpool"):
            raise ConfigError(f"downsample must be 'conv' or 'maxpool', got {self.downsample!r}")
        return self

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage


@dataclass
class Conv:
    weight: Parameter
    bias: Parameter
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            return transposed_conv2d(x, self.weight, self.bias, stride=self.stride)
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


@dataclass
class SegNet:
    config: NetConfig
    params: dict[str, Parameter] = field(default_factory=dict)
    layers: dict[str, Conv] = field(default_factory=dict)
    attention: dict[str, SeParams | CbamParams] = field(default_factory=dict)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def attention_parameter_count(self) -> int:
        return sum(p.data.size for blk in self.attention.values() for p in blk.parameters)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def _conv_param(rng, name, c_out, c_in, k, gain=np.sqrt(2.0)) -> tuple[Parameter, Parameter]:
    std = gain / np.sqrt(c_in * k * k)
    w = Parameter(rng.standard_normal((c_out, c_in, k, k)) * std, f"{name}.weight")
    b = Parameter(np.zeros(c_out), f"{name}.bias")
    return w, b


def build_network(cfg: NetConfig) -> SegNet:
    """Instantiate parameters for ``cfg``; identical seeds give identical weights."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    net = SegNet(cfg)

    def add_conv(name, c_out, c_in, k, stride=1, padding=0, transposed=False, gain=np.sqrt(2.0)):
        if transposed:
            std = gain / np.sqrt(c_in * k * k / (stride * stride))
            w = Parameter(rng.standard_normal((c_in, c_out, k, k)) * std, f"{name}.weight")
            b = Parameter(np.zeros(c_out), f"{name}.bias")
        else:
            w, b = _conv_param(rng, name, c_out, c_in, k, gain)
        net.params[w.name] = w
        net.params[b.name] = b
        net.layers[name] = Conv(w, b, stride, padding, transposed)

    def add_attention(stage_name, channels):
        if cfg.variant == "baseline":
            return
        if cfg.variant == "se":
            blk = SeParams.create(channels, cfg.reduction, rng=rng, prefix=f"{stage_name}.se")
        else:
            blk = CbamParams.create(channels, cfg.reduction, cfg.spatial_kernel, rng=rng,
                                    prefix=f"{stage_name}.cbam")
        net.attention[stage_name] = blk
        for p in blk.parameters:
            net.params[p.name] = p

    c_prev = cfg.in_channels
    for i in range(cfg.depth):
        c = cfg.channels(i)
        add_conv(f"enc{i}.conv1", c, c_prev, 3, padding=1)
        add_conv(f"enc{i}.conv2", c, c, 3, padding=1)
        if cfg.attend_encoder:
            add_attention(f"enc{i}", c)
        if cfg.downsample == "conv":
            add_conv(f"enc{i}.down", c, c, 3, stride=2, padding=1)
        c_prev = c
    c_bot = cfg.channels(cfg.depth)
    add_conv("bottleneck.conv1", c_bot, c_prev, 3, padding=1)
    add_conv("bottleneck.conv2", c_bot, c_bot, 3, padding=1)
    c_prev = c_bot
    for i in reversed(range(cfg.depth)):
        c = cfg.channels(i)
        add_conv(f"dec{i}.up", c, c_prev, 2, stride=2, transposed=True)
        join = 2 * c if cfg.skip_mode == "concat" else c
        add_conv(f"dec{i}.conv1", c, join, 3, padding=1)
        add_conv(f"dec{i}.conv2", c, c, 3, padding=1)
        if cfg.attend_decoder:
            add_attention(f"dec{i}", c)
        c_prev = c
    add_conv("head", 1, c_prev, 1, gain=1.0)
    return net


def _attend(net: SegNet, stage: str, x: Tensor) -> Tensor:
    blk = net.attention.get(stage)
    if blk is None:
        return x
    return se_forward(x, blk) if isinstance(blk, SeParams) else cbam_forward(x, blk)


def _relu_conv(net: SegNet, name: str, x: Tensor) -> Tensor:
    return activation(net.layers[name](x), "relu")


def forward(net: SegNet, x) -> Tensor:
    """Probability map ``1 x H x W`` (``N x 1 x H x W`` for batched input)."""
    cfg = net.config
    x = as_tensor(x)
    dtype = net.params["head.weight"].dtype
    if x.dtype != dtype and not x.requires_grad:
        x = Tensor(x.data, dtype=dtype)
    if x.ndim not in (3, 4):
        raise DimensionError(f"network input must be C x H x W or N x C x H x W, got {x.shape}")
    c, h, w = x.shape[-3:]
    if c != cfg.in_channels:
        raise DimensionError(f"network expects {cfg.in_channels} input channels, got {c}")
    factor = 2 ** cfg.depth
    if h % factor or w % factor:
        raise DimensionError(f"input {h}x{w} is not divisible by 2**depth = {factor}")

    skips = []
    for i in range(cfg.depth):
        x = _relu_conv(net, f"enc{i}.conv1", x)
        x = _relu_conv(net, f"enc{i}.conv2", x)
        x = _attend(net, f"enc{i}", x)
        skips.append(x)
        if cfg.downsample == "conv":
            x = _relu_conv(net, f"enc{i}.down", x)
        else:
            x = max_pool2x2(x)
    x = _relu_conv(net, "bottleneck.conv1", x)
    x = _relu_conv(net, "bottleneck.conv2", x)
    for i in reversed(range(cfg.depth)):
        up = net.layers[f"dec{i}.up"](x)
        skip = skips.pop()
        if up.shape != skip.shape:
            raise DimensionError(f"skip shape {skip.shape} does not match decoder shape {up.shape}")
        x = concat_channels(up, skip) if cfg.skip_mode == "concat" else add(up, skip)
        x = _relu_conv(net, f"dec{i}.conv1", x)
        x = _relu_conv(net, f"dec{i}.conv2", x)
        x = _attend(net, f"dec{i}", x)
    return activation(net.layers["head"](x), "sigmoid")


def predict_mask(net: SegNet, x, threshold: float = 0.5) -> Tensor:
    """Binary mask: 1 where the predicted probability is ``>= threshold``."""
    with no_grad():
        probs = forward(net, x)
    return Tensor(binarize_mask(probs.data, threshold), dtype=probs.dtype)


@dataclass
class ParamSummary:
    rows: list[tuple[str, tuple[int, ...], int]]

    @property
    def total(self) -> int:
        return sum(count for _, _, count in self.rows)

    def format(self) -> str:
        width = max((len(name) for name, _, _ in self.rows), default=4)
        lines = [f"{'name':<{width}}  {'shape':<18} count"]
        for name, shape, count in self.rows:
            lines.append(f"{name:<{width}}  {str(shape):<18} {count}")
        lines.append(f"{'total':<{width}}  {'':<18} {self.total}")
        return "\n".join(lines)


def param_summary(net: SegNet) -> ParamSummary:
    return ParamSummary([(name, p.shape, int(p.data.size)) for name, p in net.params.items()])
