"""Dense tensors with a small reverse-mode tape.

Feature maps are ``C x H x W``; every primitive also accepts a leading batch
axis (``N x C x H x W``) so training can run whole batches through one call.
All arithmetic is delegated to numpy; the tape only records, per result, the
op name, its inputs and a closure mapping the output gradient to input
gradients.
"""

from __future__ import annotations

import contextlib
import weakref
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, NonFiniteError, NonSmoothError

_default_dtype = np.float32
_grad_enabled = True
_finite_guard = False
_tracker: "MemoryTracker | None" = None
_branches: "list[np.ndarray] | None" = None


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported precision {dtype!r}")
    prev, _default_dtype = _default_dtype, dtype
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable taping; results carry no history and hold no references."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_branches() -> Iterator[list[np.ndarray]]:
    """Collect the branch taken by every non-smooth op (ReLU signs, max argmax) in call order."""
    global _branches
    prev, _branches = _branches, []
    try:
        yield _branches
    finally:
        _branches = prev


def _note_branch(choice: np.ndarray) -> None:
    if _branches is not None:
        _branches.append(np.array(choice, copy=True))


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


@contextlib.contextmanager
def finite_guard(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteError` naming the op as soon as NaN/Inf appears."""
    global _finite_guard
    prev, _finite_guard = _finite_guard, enabled
    try:
        yield
    finally:
        _finite_guard = prev


class MemoryTracker:
    """Counts bytes held by live tensor buffers.

    Allocation is recorded when a :class:`Tensor` is constructed and released
    when it is garbage collected, so with CPython refcounting the peak is a
    deterministic function of the computation.
    """

    def __init__(self, baseline: int = 0):
        self.live = baseline
        self.peak = baseline
        self.allocations = 0

    def _alloc(self, nbytes: int) -> None:
        self.live += nbytes
        self.allocations += 1
        if self.live > self.peak:
            self.peak = self.live

    def _free(self, nbytes: int) -> None:
        self.live -= nbytes


@contextlib.contextmanager
def track_memory(baseline: int = 0) -> Iterator[MemoryTracker]:
    global _tracker
    prev, _tracker = _tracker, MemoryTracker(baseline)
    try:
        yield _tracker
    finally:
        _tracker = prev


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A dense real array plus the tape node that produced it (if any)."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = dtype or _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        if _tracker is not None:
            nbytes = self.data.nbytes
            _tracker._alloc(nbytes)
            weakref.finalize(self, _tracker._free, nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tsum(self)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named learnable tensor whose gradient buffer starts at zero."""

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        if not name:
            raise ContractError("parameter name must be non-empty")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype), dtype=like.dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and, when taping is on, attach its backward rule.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per entry of ``inputs``.
    """
    if _finite_guard and not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs, dtype=out.dtype)
    if needs:
        result.node = TapeNode(op, tuple(inputs), backward_fn)
    return result


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Repeated calls add to existing gradients; use :func:`zero_grads` between
    optimisation steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
                      branch_guard: bool = False) -> float:
    """Largest relative error between the taped gradient and central differences.

    ``x`` is perturbed in place (and restored), so ``fn`` may ignore its
    argument and close over ``x`` instead, which is how parameters are checked.
    Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.

    With ``branch_guard`` every perturbed evaluation must take the same ReLU /
    max branches as the unperturbed one; otherwise the stencil straddles a kink,
    the difference quotient is not a derivative estimate, and
    :class:`NonSmoothError` is raised.
    """
    if x.data.dtype != np.float64:
        raise ContractError("finite_diff_check requires a float64 tensor")
    had_grad = x.requires_grad
    x.requires_grad = True
    saved = x.grad
    x.grad = np.zeros_like(x.data)
    try:
        with record_branches() as base:
            out = fn(x)
        backward(out)
        analytic = x.grad.copy()
        numeric = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                values = []
                for step in (eps, -eps):
                    flat[i] = orig + step
                    with record_branches() as seen:
                        values.append(fn(x).item())
                    if branch_guard and not _same_branches(base, seen):
                        flat[i] = orig
                        raise NonSmoothError(i, eps)
                flat[i] = orig
                num_flat[i] = (values[0] - values[1]) / (2.0 * eps)
    finally:
        x.requires_grad = had_grad
        x.grad = saved
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# ---------------------------------------------------------------------------
# primitives


def _batched(x: Tensor, ndim: int) -> tuple[np.ndarray, bool]:
    """Return ``x.data`` with a batch axis and whether one had to be added."""
    if x.ndim == ndim:
        return x.data[None], True
    if x.ndim == ndim + 1:
        return x.data, False
    raise DimensionError(f"expected {ndim}-d or batched {ndim + 1}-d tensor, got shape {x.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return apply_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return apply_op("scale", a.data * c, (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return apply_op("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                    lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch(mask)
    return apply_op("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid_array(v: np.ndarray) -> np.ndarray:
    s = expit(v).astype(v.dtype, copy=False)
    # saturated values are held one step inside the open interval
    info = np.finfo(v.dtype)
    return np.clip(s, info.tiny, np.nextafter(v.dtype.type(1), v.dtype.type(0)))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_array(x.data)
    return apply_op("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation; ``kernel`` is ``C_out x C_in x k x k``."""
    xb, squeeze = _batched(x, 3)
    w = kernel.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: kernel must be C_out x C_in x k x k, got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if xb.shape[1] != c_in:
        raise DimensionError(f"conv2d: input has {xb.shape[1]} channels, kernel expects {c_in}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be >= 1 and padding >= 0")
    n, _, h, wd = xb.shape
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{wd}+{padding}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    p, s = padding, stride
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xb.dtype)

    def back(g):
        gb = g[None] if squeeze else g
        dw = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))
        dcol = np.tensordot(gb, w, axes=([1], [0]))  # N,Ho,Wo,C_in,k,k
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s] += \
                    dcol[..., di, dj].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        dx = dx[0] if squeeze else dx
        db = gb.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dw, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return apply_op("conv2d", out[0] if squeeze else out, inputs, back)


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` without padding; ``kernel`` is ``C_in x C_out x k x k``.

    Output extent is ``(H - 1) * stride + k``.
    """
    xb, squeeze = _batched(x, 3)
    w = kernel.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"transposed_conv2d: kernel must be C_in x C_out x k x k, got {w.shape}")
    c_in, c_out, k, _ = w.shape
    if xb.shape[1] != c_in:
        raise DimensionError(f"transposed_conv2d: input has {xb.shape[1]} channels, kernel expects {c_in}")
    if stride < 1:
        raise ContractError("transposed_conv2d: stride must be >= 1")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"transposed_conv2d: bias shape {bias.shape} != ({c_out},)")
    s = stride
    n, _, h, wd = xb.shape
    ho, wo = (h - 1) * s + k, (wd - 1) * s + k
    cols = np.tensordot(xb, w, axes=([1], [0]))  # N,H,W,C_out,k,k
    out = np.zeros((n, c_out, ho, wo), dtype=xb.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + s * (h - 1) + 1:s, dj:dj + s * (wd - 1) + 1:s] += \
                cols[..., di, dj].transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gb = g[None] if squeeze else g
        gwin = sliding_window_view(gb, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :h, :wd]
        dx = np.tensordot(gwin, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        dw = np.tensordot(xb, gwin, axes=([0, 2, 3], [0, 2, 3]))
        dx = np.ascontiguousarray(dx[0] if squeeze else dx)
        db = gb.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dw, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return apply_op("transposed_conv2d", out[0] if squeeze else out, inputs, back)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = W x + b`` for a length-n vector or an ``N x n`` batch."""
    xb, squeeze = _batched(x, 1)
    w = weight.data
    if w.ndim != 2 or w.shape[1] != xb.shape[1]:
        raise DimensionError(f"fully_connected: weight {w.shape} does not accept input length {xb.shape[1]}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"fully_connected: bias shape {bias.shape} != ({w.shape[0]},)")
    out = xb @ w.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gb = g[None] if squeeze else g
        dx = gb @ w
        dw = gb.T @ xb
        db = gb.sum(axis=0) if bias is not None else None
        return (dx[0] if squeeze else dx), dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("fully_connected", out[0] if squeeze else out, inputs, back)


def _pool(x: Tensor, mode: str, axis, op: str):
    """Average or max over ``axis`` of a batched view; max routes grads to the first argmax."""
    xb, squeeze = _batched(x, 3)
    if mode == "avg":
        count = np.prod([xb.shape[a] for a in axis])
        out = xb.mean(axis=axis, keepdims=True)

        def back(g):
            gb = g[None] if squeeze else g
            gb = gb.reshape(out.shape)
            dx = np.broadcast_to(gb / xb.dtype.type(count), xb.shape).copy()
            return (dx[0] if squeeze else dx,)
    elif mode == "max":
        moved = np.moveaxis(xb, axis, tuple(range(-len(axis), 0)))
        flat = moved.reshape(*moved.shape[:-len(axis)], -1)
        arg = flat.argmax(axis=-1)
        _note_branch(arg)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)
        out = np.moveaxis(out.reshape(*moved.shape[:-len(axis)], *([1] * len(axis))),
                          tuple(range(-len(axis), 0)), axis)

        def back(g):
            gb = g[None] if squeeze else g
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, arg[..., None], gb.reshape(arg.shape)[..., None], axis=-1)
            dx = np.moveaxis(dflat.reshape(moved.shape), tuple(range(-len(axis), 0)), axis)
            dx = np.ascontiguousarray(dx)
            return (dx[0] if squeeze else dx,)
    else:
        raise ContractError(f"unknown pooling mode {mode!r}")
    return out, squeeze, back


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-channel spatial mean or max: ``C x H x W -> C`` (``N x C`` when batched)."""
    out, squeeze, back = _pool(x, mode, (2, 3), "global_pool")
    out = out.reshape(out.shape[:2])
    return apply_op(f"global_pool[{mode}]", out[0] if squeeze else out, (x,), back)


def channel_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-pixel mean or max across channels: ``C x H x W -> 1 x H x W``."""
    out, squeeze, back = _pool(x, mode, (1,), "channel_pool")
    return apply_op(f"channel_pool[{mode}]", out[0] if squeeze else out, (x,), back)


def broadcast_mul(f: Tensor, s: Tensor) -> Tensor:
    """Scale a feature map per channel (``s`` of length C) or per pixel (``s`` 1 x H x W)."""
    fb, squeeze = _batched(f, 3)
    sd = s.data[None] if squeeze else s.data
    n, c, h, w = fb.shape
    if sd.shape == (n, c):
        sb = sd[:, :, None, None]
        reduce_axes = (2, 3)
    elif sd.shape == (n, 1, h, w):
        sb = sd
        reduce_axes = (1,)
    else:
        raise DimensionError(f"broadcast_mul: scale shape {s.shape} fits neither channel nor spatial mode of {f.shape}")
    out = fb * sb

    def back(g):
        gb = g[None] if squeeze else g
        df = gb * sb
        ds = (gb * fb).sum(axis=reduce_axes, keepdims=True).reshape(sd.shape)
        return (df[0] if squeeze else df), (ds[0] if squeeze else ds)

    return apply_op("broadcast_mul", out[0] if squeeze else out, (f, s), back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    ab, squeeze_a = _batched(a, 3)
    bb, squeeze_b = _batched(b, 3)
    if squeeze_a != squeeze_b or ab.shape[0] != bb.shape[0] or ab.shape[2:] != bb.shape[2:]:
        raise DimensionError(f"concat_channels: {a.shape} and {b.shape} differ outside the channel axis")
    c1 = ab.shape[1]
    out = np.concatenate([ab, bb], axis=1)

    def back(g):
        gb = g[None] if squeeze_a else g
        ga, gbb = gb[:, :c1], gb[:, c1:]
        if squeeze_a:
            ga, gbb = ga[0], gbb[0]
        return np.ascontiguousarray(ga), np.ascontiguousarray(gbb)

    return apply_op("concat_channels", out[0] if squeeze_a else out, (a, b), back)


def max_pool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling over the last two axes."""
    d = x.data
    lead = d.shape[:-2]
    h, w = d.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2x2: spatial size {h}x{w} is not even")
    blocks = d.reshape(*lead, h // 2, 2, w // 2, 2).swapaxes(-3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    _note_branch(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(*lead, h // 2, w // 2, 2, 2).swapaxes(-3, -2).reshape(d.shape),)

    return apply_op("max_pool2x2", np.ascontiguousarray(out), (x,), back)
