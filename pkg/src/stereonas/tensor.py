"""Minimal reverse-mode autodiff over dense 4-D tensors.

Everything is double precision and lives on the CPU as numpy arrays.
Operations record onto an explicit :class:`Tape` (one per training step);
:func:`backward` walks the tape in reverse and returns a gradient map for
the leaf tensors.  The primitive set is intentionally small: exactly the
kernels the candidate operations and the disparity task heads need.

Convolutions are im2col/matmul based with per-shape index caches; scatter
passes (col2im) go through ``np.bincount`` which keeps backward passes
vectorized.  Bilinear resampling is expressed as two dense interpolation
matrices so its adjoint is an exact transpose.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "ConvSpec",
    "tensor",
    "zeros",
    "full",
    "from_scalar",
    "record",
    "backward",
    "grad_check",
    "conv2d",
    "transposed_conv2d",
    "pool2d",
    "bilinear_resize",
    "concat_channels",
    "split_channels",
    "relu",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "abs_val",
    "sum_all",
    "channel_affine",
    "softmax_vec",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
]


class Tensor:
    """A dense (batch, channels, height, width) array of float64.

    ``grad`` is populated by :func:`backward` for leaves with
    ``requires_grad`` set; it always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (b, c, h, w); got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, shape={self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a Tensor from array-like data; shape must already be 4-D."""
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def full(shape: Sequence[int], value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(tuple(shape), float(value)), requires_grad=requires_grad)


def from_scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of primitive applications within one training step.

    Entries are appended in execution order, so the list is already a
    topological order of the compute graph; backward walks it once in
    strict reverse.  Use as a context manager::

        with Tape() as tape:
            y = conv2d(x, spec, w)
            loss = sum_all(y)
        grads = backward(tape, loss)
    """

    __slots__ = ("entries",)

    def __init__(self):
        # each entry: (output, inputs, backward_fn)
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.entries)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(output: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Attach a primitive application to the active tape.

    ``backward_fn`` maps the output cotangent to one cotangent per input
    (``None`` for inputs that need none).  Recording only happens when a
    tape is active and some input requires grad; otherwise the output is
    returned as a plain constant.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.entries.append((output, inputs, backward_fn))
    return output


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    Returns a map of leaf tensor -> gradient and stores the same array in
    each leaf's ``.grad`` (overwriting, so replaying the same tape yields
    identical gradients).
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced = {id(out) for out, _, _ in tape.entries}

    for out, inputs, backward_fn in reversed(tape.entries):
        g_out = grads.get(id(out))
        if g_out is None:
            continue  # not on a path to the loss
        g_inputs = backward_fn(g_out)
        for inp, g in zip(inputs, g_inputs):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = inp

    result: dict[Tensor, np.ndarray] = {}
    for key, t in holders.items():
        if key in produced or not t.requires_grad:
            continue
        g = np.ascontiguousarray(grads[key])
        t.grad = g
        result[t] = g
    return result


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    return record(out, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0
    return record(out, (x,), lambda g: (g * mask,))


def abs_val(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    sign = np.sign(x.data)  # subgradient 0 at the kink
    return record(out, (x,), lambda g: (g * sign,))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.full((1, 1, 1, 1), x.data.sum()))
    shape = x.shape
    return record(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape),))


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift: out = x * gamma + beta.

    gamma and beta are (1, C, 1, 1) and broadcast over batch and space.
    """
    c = x.shape[1]
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(
            f"channel_affine: gamma/beta must be (1,{c},1,1), got {gamma.shape}/{beta.shape}"
        )
    out = Tensor(x.data * gamma.data + beta.data)

    def bwd(g):
        gx = g * gamma.data
        gg = (g * x.data).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        return gx, gg, gb

    return record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Convolution


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution.

    ``kernel`` is (out_channels, in_channels_per_group, kh, kw).
    """

    kernel: tuple[int, int, int, int]
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.groups < 1 or self.padding < 0:
            raise ConfigError(f"invalid conv spec: {self}")
        out_ch = self.kernel[0]
        if out_ch % self.groups != 0:
            raise ConfigError(
                f"out_channels={out_ch} not divisible by groups={self.groups}"
            )

    @property
    def in_channels(self) -> int:
        return self.kernel[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.kernel[0]

    def out_size(self, size: int) -> int:
        k = self.kernel[2]  # kernels are square in this search space
        return (size + 2 * self.padding - self.dilation * (k - 1) - 1) // self.stride + 1


_COL_CACHE: dict[tuple, tuple] = {}


def _col_indices(h: int, w: int, kh: int, kw: int, stride: int, dilation: int, pad: int):
    """Gather indices mapping a padded (h,w) plane to im2col layout.

    Returns (flat, out_h, out_w, hp, wp) where flat has shape
    (kh*kw, out_h*out_w) and indexes the flattened padded plane.
    """
    key = (h, w, kh, kw, stride, dilation, pad)
    hit = _COL_CACHE.get(key)
    if hit is not None:
        return hit
    out_h = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    out_w = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ConfigError(
            f"convolution output collapsed: input {h}x{w}, k={kh}x{kw}, "
            f"stride={stride}, dilation={dilation}, pad={pad}"
        )
    hp, wp = h + 2 * pad, w + 2 * pad
    ki = np.repeat(np.arange(kh) * dilation, kw)
    kj = np.tile(np.arange(kw) * dilation, kh)
    oi = stride * np.repeat(np.arange(out_h), out_w)
    oj = stride * np.tile(np.arange(out_w), out_h)
    flat = (ki[:, None] + oi[None, :]) * wp + (kj[:, None] + oj[None, :])
    hit = (flat, out_h, out_w, hp, wp)
    _COL_CACHE[key] = hit
    return hit


def _pad2d(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * pad, w + 2 * pad), value)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def _im2col(x: np.ndarray, kh, kw, stride, dilation, pad):
    n, c, h, w = x.shape
    flat, out_h, out_w, hp, wp = _col_indices(h, w, kh, kw, stride, dilation, pad)
    xp = _pad2d(x, pad)
    cols = xp.reshape(n, c, hp * wp)[:, :, flat]  # (n, c, kh*kw, L)
    return cols, out_h, out_w


_SCATTER_CACHE: dict[tuple, np.ndarray] = {}


def _col2im(dcols: np.ndarray, h, w, kh, kw, stride, dilation, pad):
    """Adjoint of _im2col: scatter-add (n, c, kh*kw, L) back to (n, c, h, w)."""
    n, c = dcols.shape[:2]
    flat, out_h, out_w, hp, wp = _col_indices(h, w, kh, kw, stride, dilation, pad)
    plane = hp * wp
    key = (h, w, kh, kw, stride, dilation, pad, n * c)
    idx = _SCATTER_CACHE.get(key)
    if idx is None:
        offsets = np.arange(n * c, dtype=np.intp)[:, None] * plane
        idx = (offsets + flat.reshape(1, -1)).ravel()
        _SCATTER_CACHE[key] = idx
    acc = np.bincount(idx, weights=dcols.reshape(n * c, -1).ravel(), minlength=n * c * plane)
    gxp = acc.reshape(n, c, hp, wp)
    if pad:
        gxp = gxp[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(gxp)


def _check_conv_args(x: Tensor, spec: ConvSpec, weights: Tensor) -> None:
    if weights.shape != spec.kernel:
        raise ConfigError(f"weights shape {weights.shape} != spec kernel {spec.kernel}")
    if x.shape[1] != spec.in_channels:
        raise ConfigError(
            f"input has {x.shape[1]} channels but spec expects "
            f"{spec.in_channels} (= {spec.kernel[1]} per group x {spec.groups} groups)"
        )
    if x.shape[1] % spec.groups != 0:
        raise ConfigError(f"in_channels={x.shape[1]} not divisible by groups={spec.groups}")


def _conv2d_pointwise(x: Tensor, spec: ConvSpec, weights: Tensor,
                      bias: Tensor | None) -> Tensor:
    """1x1 stride-1 convolution: a plain channel matmul, no gather/scatter."""
    n, c, h, w = x.shape
    co = spec.kernel[0]
    wm = weights.data.reshape(co, c)
    out = np.matmul(wm[None], x.data.reshape(n, c, h * w)).reshape(n, co, h, w)
    if bias is not None:
        if bias.shape != (1, co, 1, 1):
            raise ConfigError(f"bias must be (1,{co},1,1), got {bias.shape}")
        out = out + bias.data
    out_t = Tensor(out)
    inputs = (x, weights) if bias is None else (x, weights, bias)

    def bwd(gout):
        gflat = gout.reshape(n, co, h * w)
        gx = None
        if x.requires_grad:
            gx = np.matmul(wm.T[None], gflat).reshape(n, c, h, w)
        gw = np.matmul(gflat, x.data.reshape(n, c, h * w).transpose(0, 2, 1))
        gw = gw.sum(axis=0).reshape(co, c, 1, 1)
        if bias is None:
            return gx, gw
        return gx, gw, gout.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)

    return record(out_t, inputs, bwd)


def _conv2d_depthwise(x: Tensor, spec: ConvSpec, weights: Tensor) -> Tensor:
    """Depthwise convolution (groups == channels): per-channel column contraction."""
    n, c, h, w = x.shape
    _, _, kh, kw = spec.kernel
    cols, out_h, out_w = _im2col(x.data, kh, kw, spec.stride, spec.dilation, spec.padding)
    wk = weights.data.reshape(c, kh * kw, 1)
    out = (cols * wk).sum(axis=2)
    out_t = Tensor(out.reshape(n, c, out_h, out_w))

    def bwd(gout):
        gflat = gout.reshape(n, c, 1, out_h * out_w)
        gx = None
        if x.requires_grad:
            gx = _col2im(wk * gflat, h, w, kh, kw, spec.stride, spec.dilation, spec.padding)
        gw = (cols * gflat).sum(axis=(0, 3))
        return gx, gw.reshape(c, 1, kh, kw)

    return record(out_t, (x, weights), bwd)


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Strided/dilated/grouped cross-correlation."""
    _check_conv_args(x, spec, weights)
    n, c, h, w = x.shape
    co, cg, kh, kw = spec.kernel
    g = spec.groups
    if kh == kw == 1 and spec.stride == 1 and spec.padding == 0 and g == 1:
        return _conv2d_pointwise(x, spec, weights, bias)
    if g == c and co == c and cg == 1 and bias is None:
        return _conv2d_depthwise(x, spec, weights)
    cols, out_h, out_w = _im2col(x.data, kh, kw, spec.stride, spec.dilation, spec.padding)
    # (n, g, cg*kh*kw, L) x (g, co/g, cg*kh*kw)
    cols_g = cols.reshape(n, g, (c // g) * kh * kw, out_h * out_w)
    w_g = weights.data.reshape(g, co // g, cg * kh * kw)
    out = np.matmul(w_g[None], cols_g).reshape(n, co, out_h, out_w)
    if bias is not None:
        if bias.shape != (1, co, 1, 1):
            raise ConfigError(f"bias must be (1,{co},1,1), got {bias.shape}")
        out = out + bias.data

    out_t = Tensor(out)
    inputs = (x, weights) if bias is None else (x, weights, bias)

    def bwd(gout):
        gout_g = gout.reshape(n, g, co // g, out_h * out_w)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w_g.transpose(0, 2, 1)[None], gout_g)
            gx = _col2im(
                dcols.reshape(n, c, kh * kw, out_h * out_w),
                h, w, kh, kw, spec.stride, spec.dilation, spec.padding,
            )
        gw = np.matmul(gout_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
        gw = gw.reshape(co, cg, kh, kw)
        if bias is None:
            return gx, gw
        gb = gout.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)
        return gx, gw, gb

    return record(out_t, inputs, bwd)


def transposed_conv2d(x: Tensor, spec: ConvSpec, weights: Tensor) -> Tensor:
    """Fractionally-strided convolution (the adjoint of conv2d).

    ``spec.kernel`` is (in_channels, out_channels_per_group, kh, kw); with
    the canonical k=4, stride=2, pad=1 it exactly doubles spatial dims.
    Output dims must equal stride x input dims, which requires
    dilation*(k-1) + 1 - 2*pad == stride.
    """
    ci, cog, kh, kw = spec.kernel
    g = spec.groups
    if weights.shape != spec.kernel:
        raise ConfigError(f"weights shape {weights.shape} != spec kernel {spec.kernel}")
    if x.shape[1] != ci:
        raise ConfigError(f"input has {x.shape[1]} channels but kernel expects {ci}")
    n, c, h, w = x.shape
    co = cog * g
    for k in (kh, kw):
        if spec.dilation * (k - 1) + 1 - 2 * spec.padding != spec.stride:
            raise ConfigError(
                f"transposed conv does not scale by an integral factor: "
                f"k={k}, stride={spec.stride}, pad={spec.padding}, "
                f"dilation={spec.dilation} (need dilation*(k-1)+1-2*pad == stride)"
            )
    out_h = h * spec.stride
    out_w = w * spec.stride

    # out = scatter(W^T @ x) over the virtual forward conv out->in
    x_g = x.data.reshape(n, g, ci // g * 1, h * w)  # treat x as the conv's gout
    w_g = weights.data.reshape(g, ci // g, cog * kh * kw) if g > 1 else weights.data.reshape(
        1, ci, cog * kh * kw
    )
    # per group: (cog*kh*kw, ci/g) @ (ci/g, L) -> (cog*kh*kw, L)
    dcols = np.matmul(w_g.transpose(0, 2, 1)[None], x_g.reshape(n, g, ci // g, h * w))
    out = _col2im(
        dcols.reshape(n, co, kh * kw, h * w),
        out_h, out_w, kh, kw, spec.stride, spec.dilation, spec.padding,
    )
    out_t = Tensor(out)

    def bwd(gout):
        cols, oh2, ow2 = _im2col(gout, kh, kw, spec.stride, spec.dilation, spec.padding)
        cols_g = cols.reshape(n, g, co // g * kh * kw, h * w)
        gx = None
        if x.requires_grad:
            gx = np.matmul(w_g[None], cols_g).reshape(n, ci, h, w)
        # dW: correlate the cotangent's columns with the input acting as gout
        gw = np.matmul(x_g.reshape(n, g, ci // g, h * w), cols_g.transpose(0, 1, 3, 2))
        gw = gw.sum(axis=0).reshape(ci, cog, kh, kw)
        return gx, gw

    return record(out_t, (x, weights), bwd)


# ---------------------------------------------------------------------------
# Pooling


def pool2d(x: Tensor, kind: str, k: int = 3, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3-style window pooling.

    ``avg`` divides by k*k including zero padding; ``max`` pads with -inf
    so border maxima only see real values.
    """
    if kind not in ("avg", "max"):
        raise ConfigError(f"pool kind must be 'avg' or 'max', got {kind!r}")
    n, c, h, w = x.shape
    flat, out_h, out_w, hp, wp = _col_indices(h, w, k, k, stride, 1, pad)
    pad_value = 0.0 if kind == "avg" else -np.inf
    xp = _pad2d(x.data, pad, pad_value)
    windows = xp.reshape(n * c, hp * wp)[:, flat]  # (n*c, k*k, L)

    if kind == "avg":
        scale = 1.0 / (k * k)
        out = windows.sum(axis=1) * scale
        out_t = Tensor(out.reshape(n, c, out_h, out_w))

        def bwd(gout):
            gflat = np.broadcast_to(
                gout.reshape(n * c, 1, out_h * out_w) * scale, (n * c, k * k, out_h * out_w)
            )
            gx = _col2im(gflat.reshape(n, c, k * k, -1), h, w, k, k, stride, 1, pad)
            return (gx,)

        return record(out_t, (x,), bwd)

    arg = windows.argmax(axis=1)  # first max wins ties
    out = np.take_along_axis(windows, arg[:, None, :], axis=1)[:, 0, :]
    out_t = Tensor(out.reshape(n, c, out_h, out_w))
    L = out_h * out_w

    def bwd(gout):
        pos = flat[arg, np.arange(L)[None, :]]  # (n*c, L) plane positions
        offsets = np.arange(n * c, dtype=np.intp)[:, None] * (hp * wp)
        acc = np.bincount(
            (pos + offsets).ravel(), weights=gout.reshape(n * c, L).ravel(),
            minlength=n * c * hp * wp,
        )
        gxp = acc.reshape(n, c, hp, wp)
        if pad:
            gxp = gxp[:, :, pad : pad + h, pad : pad + w]
        return (np.ascontiguousarray(gxp),)

    return record(out_t, (x,), bwd)


# ---------------------------------------------------------------------------
# Bilinear resize


_RESIZE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense 1-D bilinear interpolation matrix, align-corners=false.

    Output sample i reads input coordinate (i + 0.5) * n_in/n_out - 0.5
    with edge clamping, so constants are reproduced exactly.
    """
    key = (n_in, n_out)
    hit = _RESIZE_CACHE.get(key)
    if hit is not None:
        return hit
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * ratio - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    _RESIZE_CACHE[key] = m
    return m


def bilinear_resize(x: Tensor, scale) -> Tensor:
    """Resample spatially by a positive rational factor (exact on constants)."""
    frac = Fraction(scale).limit_denominator(10**6)
    if frac <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    n, c, h, w = x.shape
    out_h = h * frac
    out_w = w * frac
    if out_h.denominator != 1 or out_w.denominator != 1:
        raise ConfigError(f"scale {scale} does not map {h}x{w} to integral dims")
    out_h, out_w = int(out_h), int(out_w)
    if frac == 1:
        out_t = Tensor(x.data.copy())
        return record(out_t, (x,), lambda g: (g,))

    mh = _resize_matrix(h, out_h)
    mw = _resize_matrix(w, out_w)
    # rows: (out_h, h) @ (n*c, h, w); cols: result @ (w, out_w)
    y = np.matmul(mh[None], x.data.reshape(n * c, h, w))
    y = np.matmul(y, mw.T)
    out_t = Tensor(y.reshape(n, c, out_h, out_w))

    def bwd(gout):
        g = np.matmul(mh.T[None], gout.reshape(n * c, out_h, out_w))
        g = np.matmul(g, mw)
        return (np.ascontiguousarray(g.reshape(n, c, h, w)),)

    return record(out_t, (x,), bwd)


# ---------------------------------------------------------------------------
# Concatenation / splitting


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(
                f"concat_channels: batch/spatial mismatch {t.shape} vs {ref}"
            )
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes)))

    return record(out, tuple(xs), bwd)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    bounds = np.cumsum([0] + list(sizes))
    parts = []
    for i in range(len(sizes)):
        lo, hi = bounds[i], bounds[i + 1]
        part = Tensor(np.ascontiguousarray(x.data[:, lo:hi]))

        def bwd(g, lo=lo, hi=hi):
            gx = np.zeros_like(x.data)
            gx[:, lo:hi] = g
            return (gx,)

        parts.append(record(part, (x,), bwd))
    return parts


# ---------------------------------------------------------------------------
# Softmax over a plain vector (architecture weights)


def softmax_vec(v: Sequence[float] | np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Stable softmax of a 1-D vector at the given temperature."""
    if temperature <= 0:
        raise ConfigError(f"softmax temperature must be > 0, got {temperature}")
    a = np.asarray(v, dtype=np.float64).ravel() / float(temperature)
    a = a - a.max()
    e = np.exp(a)
    return e / e.sum()


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must map a tensor to a scalar tensor.  The caller is responsible
    for keeping ``x`` away from non-smooth points (relu kinks, pool ties).
    """
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
        grads = backward(tape, y)
        g_analytic = grads.get(x)
        if g_analytic is None:
            g_analytic = np.zeros_like(x.data)
    finally:
        x.requires_grad = was

    flat = x.data.reshape(-1)
    g_numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        g_numeric[i] = (hi - lo) / (2.0 * eps)

    ga = g_analytic.reshape(-1)
    denom = np.maximum(1e-8, np.abs(ga) + np.abs(g_numeric))
    return float(np.max(np.abs(ga - g_numeric) / denom))


# ---------------------------------------------------------------------------
# Serialization: 16-byte header (4 x u32 little-endian dims) + float64 LE


_HEADER = struct.Struct("<4I")


def tensor_to_bytes(t: Tensor) -> bytes:
    payload = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    return _HEADER.pack(*t.shape) + payload


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < _HEADER.size:
        raise DataError(f"tensor blob truncated: {len(buf)} bytes")
    dims = _HEADER.unpack_from(buf, 0)
    count = int(np.prod(dims)) if all(d > 0 for d in dims) else 0
    expected = _HEADER.size + count * 8
    if len(buf) != expected:
        raise DataError(
            f"tensor blob size mismatch: dims {dims} need {expected} bytes, got {len(buf)}"
        )
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).reshape(dims)
    return Tensor(data.astype(np.float64))


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
