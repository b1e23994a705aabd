"""Finite-difference gradient checks for every differentiable piece of the package."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .attention import CbamParams, SeParams, cbam_forward, se_forward
from .errors import NonSmoothError
from .segnet import NetConfig, build_network, forward
from .tensor import (
    Parameter,
    Tensor,
    activation,
    add,
    broadcast_mul,
    channel_pool,
    concat_channels,
    conv2d,
    finite_diff_check,
    fully_connected,
    global_pool,
    max_pool2x2,
    mul,
    precision,
    transposed_conv2d,
    tsum,
)
from .train import bce_dice_loss

TOLERANCE = 1e-4
DEFAULT_EPS = 1e-6
# Whole networks mix gradient entries spanning ~6 decades. At eps=1e-6 the
# float64 roundoff in f (~1e-15) swamps entries below ~5e-6, so networks use a
# wider step; the branch guard rejects test points whose stencil straddles a
# ReLU/max kink, leaving only O(eps^2) truncation error.
NET_EPS = 1e-4
MAX_DRAWS = 50

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass
class GradCase:
    build: Builder
    eps: float = DEFAULT_EPS
    branch_guard: bool = False


@dataclass
class CheckResult:
    case: str
    seed: int
    max_rel_error: float
    draws: int = 1  # test points drawn until one was smooth across the stencil

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _p(rng, shape, name, scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale, name)


def _check_case(case: GradCase, seed: int, eps: float | None = None) -> tuple[float, int]:
    eps = case.eps if eps is None else eps
    rng = np.random.default_rng(seed)
    for draw in range(1, MAX_DRAWS + 1):
        fn, leaves = case.build(rng)
        try:
            err = max(finite_diff_check(lambda _: fn(), leaf, eps, case.branch_guard) for leaf in leaves)
        except NonSmoothError:
            continue
        return err, draw
    raise NonSmoothError(-1, eps)


def _primitive_cases() -> dict[str, Callable]:
    def conv(rng, stride=1, padding=1):
        x = _p(rng, (2, 7, 6), "x")
        w, b = _p(rng, (3, 2, 3, 3), "w"), _p(rng, (3,), "b")
        out_shape = conv2d(x, w, b, stride, padding).shape
        r = Tensor(rng.standard_normal(out_shape))
        return (lambda: tsum(mul(conv2d(x, w, b, stride, padding), r))), [x, w, b]

    def tconv(rng):
        x = _p(rng, (2, 3, 4), "x")
        w, b = _p(rng, (2, 3, 2, 2), "w"), _p(rng, (3,), "b")
        r = Tensor(rng.standard_normal((3, 6, 8)))
        return (lambda: tsum(mul(transposed_conv2d(x, w, b, 2), r))), [x, w, b]

    def fc(rng):
        x, w, b = _p(rng, (5,), "x"), _p(rng, (3, 5), "w"), _p(rng, (3,), "b")
        r = Tensor(rng.standard_normal(3))
        return (lambda: tsum(mul(fully_connected(x, w, b), r))), [x, w, b]

    def unary(op):
        def build(rng):
            x = _p(rng, (3, 4, 5), "x")
            r = Tensor(rng.standard_normal(op(x).shape))
            return (lambda: tsum(mul(op(x), r))), [x]
        return build

    def bmul(spatial):
        def build(rng):
            f = _p(rng, (3, 4, 5), "f")
            s = _p(rng, (1, 4, 5) if spatial else (3,), "s")
            r = Tensor(rng.standard_normal((3, 4, 5)))
            return (lambda: tsum(mul(broadcast_mul(f, s), r))), [f, s]
        return build

    def binary(op, shape_b):
        def build(rng):
            a, b = _p(rng, (2, 4, 4), "a"), _p(rng, shape_b, "b")
            r = Tensor(rng.standard_normal(op(a, b).shape))
            return (lambda: tsum(mul(op(a, b), r))), [a, b]
        return build

    def loss(rng):
        p = Parameter(rng.uniform(0.05, 0.95, (1, 6, 6)), "p")
        y = (rng.random((1, 6, 6)) < 0.4).astype(np.float64)
        return (lambda: bce_dice_loss(p, y)), [p]

    return {
        "conv2d": conv,
        "conv2d[stride2]": lambda rng: conv(rng, 2, 1),
        "conv2d[nopad]": lambda rng: conv(rng, 1, 0),
        "transposed_conv2d": tconv,
        "fully_connected": fc,
        "relu": unary(lambda x: activation(x, "relu")),
        "sigmoid": unary(lambda x: activation(x, "sigmoid")),
        "global_pool[avg]": unary(lambda x: global_pool(x, "avg")),
        "global_pool[max]": unary(lambda x: global_pool(x, "max")),
        "channel_pool[avg]": unary(lambda x: channel_pool(x, "avg")),
        "channel_pool[max]": unary(lambda x: channel_pool(x, "max")),
        "max_pool2x2": _maxpool,
        "broadcast_mul[channel]": bmul(False),
        "broadcast_mul[spatial]": bmul(True),
        "concat_channels": binary(concat_channels, (3, 4, 4)),
        "add": binary(add, (2, 4, 4)),
        "mul": binary(mul, (2, 4, 4)),
        "bce_dice_loss": loss,
    }


def _maxpool(rng):
    x = _p(rng, (2, 4, 6), "x")
    r = Tensor(rng.standard_normal((2, 2, 3)))
    return (lambda: tsum(mul(max_pool2x2(x), r))), [x]


def _block_cases() -> dict[str, Callable]:
    def se(rng):
        f = _p(rng, (4, 5, 5), "f")
        blk = SeParams.create(4, 2, rng=rng)
        r = Tensor(rng.standard_normal((4, 5, 5)))
        return (lambda: tsum(mul(se_forward(f, blk), r))), [f, *blk.parameters]

    def cbam(rng):
        f = _p(rng, (4, 5, 5), "f")
        blk = CbamParams.create(4, 2, 3, rng=rng)
        blk.spatial_bias.data[:] = rng.standard_normal(1)
        r = Tensor(rng.standard_normal((4, 5, 5)))
        return (lambda: tsum(mul(cbam_forward(f, blk), r))), [f, *blk.parameters]

    return {"se_block": se, "cbam_block": cbam}


def _net_case(variant: str):
    def build(rng):
        net = build_network(NetConfig(variant=variant, depth=1, base_channels=2, reduction=2,
                                      spatial_kernel=3, seed=int(rng.integers(2**31))))
        for p in net.parameters():
            if p.name.endswith("bias"):
                p.data[:] = 0.1 * rng.standard_normal(p.shape)
        x = Tensor(rng.standard_normal((1, 8, 8)))
        r = Tensor(rng.standard_normal((1, 8, 8)))
        return (lambda: tsum(mul(forward(net, x), r))), net.parameters()
    return build


def all_cases(include_nets: bool = True) -> dict[str, GradCase]:
    cases = {name: GradCase(build) for name, build in {**_primitive_cases(), **_block_cases()}.items()}
    if include_nets:
        for v in ("baseline", "se", "cbam"):
            cases[f"net[{v}]"] = GradCase(_net_case(v), NET_EPS, branch_guard=True)
    return cases


def run_gradcheck(seeds: Iterable[int] = range(20), cases: dict[str, GradCase] | None = None,
                  eps: float | None = None) -> list[CheckResult]:
    """Check every case at every seed in 64-bit precision.

    ``eps`` overrides each case's own step size when given.
    """
    cases = cases if cases is not None else all_cases()
    results = []
    with precision(np.float64):
        for name, case in cases.items():
            for seed in seeds:
                err, draws = _check_case(case, seed, eps)
                results.append(CheckResult(name, seed, err, draws))
    return results


def summarize(results: list[CheckResult]) -> str:
    worst: dict[str, float] = {}
    for r in results:
        worst[r.case] = max(worst.get(r.case, 0.0), r.max_rel_error)
    width = max(len(k) for k in worst)
    lines = [f"{name:<{width}}  max_rel_error={err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}"
             for name, err in worst.items()]
    lines.append(f"{'overall':<{width}}  max_rel_error={max(worst.values()):.3e}")
    return "\n".join(lines)


if __name__ == "__main__":
    t0 = time.perf_counter()
    res = run_gradcheck()
    print(summarize(res))
    print(f"{time.perf_counter() - t0:.1f}s")
