"""Candidate operations of the search space plus stereo-task operations.

The candidate set has exactly 8 members (Zero, Skip, two poolings, two
separable convolutions, two dilated separable convolutions).  Zero takes
part in the continuous relaxation but is never selected at
discretization.  Task operations: 1-D horizontal correlation, horizontal
warping, and end-point-error losses.
"""

from __future__ import annotations

from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import ConfigError, EvaluationError, ShapeError
from .tensor import (
    ConvSpec,
    Tensor,
    abs_val,
    add,
    channel_affine,
    conv2d,
    mul,
    pool2d,
    record,
    relu,
    scalar_mul,
    sub,
    sum_all,
    tensor,
)

__all__ = [
    "CandidateOpKind",
    "OpInstance",
    "make_op",
    "apply_candidate",
    "correlation1d",
    "warp_horizontal",
    "epe",
    "multiscale_epe",
    "avg_downsample",
]


class CandidateOpKind(IntEnum):
    """The 8 candidate operations; ordinal order is the tie-break order."""

    ZERO = 0
    SKIP = 1
    AVG_POOL3 = 2
    MAX_POOL3 = 3
    SEP_CONV3 = 4
    SEP_CONV5 = 5
    DIL_CONV3 = 6
    DIL_CONV5 = 7


# canonical lower-case names used in genotype JSON
OP_NAMES = {
    CandidateOpKind.ZERO: "zero",
    CandidateOpKind.SKIP: "skip",
    CandidateOpKind.AVG_POOL3: "avg_pool_3x3",
    CandidateOpKind.MAX_POOL3: "max_pool_3x3",
    CandidateOpKind.SEP_CONV3: "sep_conv_3x3",
    CandidateOpKind.SEP_CONV5: "sep_conv_5x5",
    CandidateOpKind.DIL_CONV3: "dil_conv_3x3",
    CandidateOpKind.DIL_CONV5: "dil_conv_5x5",
}
OP_BY_NAME = {v: k for k, v in OP_NAMES.items()}


def _he_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class OpInstance:
    """One candidate operation instantiated for a channel/stride slot.

    Zero and Skip carry no weights; Skip with stride 2 subsamples (a
    strided 1x1 identity projection).  Separable convolutions follow the
    DARTS convention: (ReLU, depthwise kxk, pointwise 1x1) applied twice,
    stride on the first depthwise only.  Dilated variants apply the
    triple once with dilation 2.  Optional per-channel affine
    normalization after each pointwise conv / pooling sits behind
    ``affine`` (off by default: determinism and exact oracles matter more
    here than training polish).
    """

    def __init__(self, kind: CandidateOpKind, channels: int, stride: int,
                 rng: np.random.Generator | None = None, affine: bool = False):
        if stride not in (1, 2):
            raise ConfigError(f"op stride must be 1 or 2, got {stride}")
        self.kind = kind
        self.channels = channels
        self.stride = stride
        self.affine = affine
        self.weights: list[Tensor] = []
        self._affine_params: list[Tensor] = []
        c = channels

        def affine_pair():
            g = Tensor(np.ones((1, c, 1, 1)), requires_grad=True)
            b = Tensor(np.zeros((1, c, 1, 1)), requires_grad=True)
            self._affine_params += [g, b]
            return (g, b)

        if kind in (CandidateOpKind.SEP_CONV3, CandidateOpKind.SEP_CONV5):
            if rng is None:
                raise ConfigError(f"{kind.name} needs an rng for weight init")
            k = 3 if kind == CandidateOpKind.SEP_CONV3 else 5
            self._specs = []
            for rep, s in ((0, stride), (1, 1)):
                dw = ConvSpec((c, 1, k, k), stride=s, groups=c, padding=k // 2)
                pw = ConvSpec((c, c, 1, 1))
                self.weights.append(_he_init(rng, dw.kernel, k * k))
                self.weights.append(_he_init(rng, pw.kernel, c))
                self._specs.append((dw, pw, affine_pair() if affine else None))
        elif kind in (CandidateOpKind.DIL_CONV3, CandidateOpKind.DIL_CONV5):
            if rng is None:
                raise ConfigError(f"{kind.name} needs an rng for weight init")
            k = 3 if kind == CandidateOpKind.DIL_CONV3 else 5
            dw = ConvSpec((c, 1, k, k), stride=stride, dilation=2, groups=c, padding=k - 1)
            pw = ConvSpec((c, c, 1, 1))
            self.weights.append(_he_init(rng, dw.kernel, k * k))
            self.weights.append(_he_init(rng, pw.kernel, c))
            self._specs = [(dw, pw, affine_pair() if affine else None)]
        elif kind in (CandidateOpKind.AVG_POOL3, CandidateOpKind.MAX_POOL3) and affine:
            self._pool_affine = affine_pair()
        # Zero / Skip: nothing to set up

    def params(self) -> list[Tensor]:
        return self.weights + self._affine_params


def make_op(kind: CandidateOpKind, channels: int, stride: int = 1,
            rng: np.random.Generator | None = None, affine: bool = False) -> OpInstance:
    return OpInstance(kind, channels, stride, rng, affine)


def subsample2(x: Tensor) -> Tensor:
    """Stride-2 spatial subsampling (identity 1x1 projection at stride 2)."""
    n, c, h, w = x.shape
    out = Tensor(np.ascontiguousarray(x.data[:, :, ::2, ::2]))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::2, ::2] = g
        return (gx,)

    return record(out, (x,), bwd)


def apply_candidate(op: OpInstance, x: Tensor) -> Tensor:
    if x.shape[1] != op.channels:
        raise ShapeError(
            f"{op.kind.name} expects {op.channels} channels, got {x.shape[1]}"
        )
    kind = op.kind
    if kind == CandidateOpKind.ZERO:
        n, c, h, w = x.shape
        s = op.stride
        return Tensor(np.zeros((n, c, (h + s - 1) // s, (w + s - 1) // s)))
    if kind == CandidateOpKind.SKIP:
        return x if op.stride == 1 else subsample2(x)
    if kind in (CandidateOpKind.AVG_POOL3, CandidateOpKind.MAX_POOL3):
        mode = "avg" if kind == CandidateOpKind.AVG_POOL3 else "max"
        y = pool2d(x, mode, k=3, stride=op.stride, pad=1)
        if op.affine:
            y = channel_affine(y, *op._pool_affine)
        return y
    # separable / dilated separable conv chains
    y = x
    wi = 0
    for dw, pw, aff in op._specs:
        y = relu(y)
        y = conv2d(y, dw, op.weights[wi])
        y = conv2d(y, pw, op.weights[wi + 1])
        wi += 2
        if aff is not None:
            y = channel_affine(y, *aff)
    return y


# ---------------------------------------------------------------------------
# Stereo correlation


def correlation1d(left: Tensor, right: Tensor, max_disp: int) -> Tensor:
    """Horizontal patch comparison for rectified stereo pairs.

    Output channel d at (h, w) is the channel-mean of
    left[:, h, w] * right[:, h, w-d]; positions with w-d < 0 are zero.
    """
    if left.shape != right.shape:
        raise ShapeError(f"correlation1d: shapes differ {left.shape} vs {right.shape}")
    n, c, h, w = left.shape
    if max_disp >= w:
        raise ConfigError(f"max_disp={max_disp} must be < feature width {w}")
    out = np.zeros((n, max_disp + 1, h, w))
    inv_c = 1.0 / c
    for d in range(max_disp + 1):
        if d == 0:
            out[:, 0] = (left.data * right.data).sum(axis=1) * inv_c
        else:
            out[:, d, :, d:] = (left.data[:, :, :, d:] * right.data[:, :, :, :-d]).sum(axis=1) * inv_c
    out_t = Tensor(out)

    def bwd(g):
        gl = np.zeros_like(left.data)
        gr = np.zeros_like(right.data)
        for d in range(max_disp + 1):
            if d == 0:
                gl += g[:, 0:1] * right.data * inv_c
                gr += g[:, 0:1] * left.data * inv_c
            else:
                gd = g[:, d : d + 1, :, d:] * inv_c
                gl[:, :, :, d:] += gd * right.data[:, :, :, :-d]
                gr[:, :, :, :-d] += gd * left.data[:, :, :, d:]
        return gl, gr

    return record(out_t, (left, right), bwd)


# ---------------------------------------------------------------------------
# Horizontal warping


def warp_horizontal(img: Tensor, disparity: Tensor) -> Tensor:
    """Sample img at (h, w - disparity(h, w)) with bilinear interpolation.

    Out-of-bounds samples are zero.  Differentiable in both inputs; the
    disparity gradient is the horizontal image difference at the sample.
    """
    n, c, h, w = img.shape
    if disparity.shape != (n, 1, h, w):
        raise ShapeError(
            f"disparity must be ({n},1,{h},{w}), got {disparity.shape}"
        )
    src = np.arange(w)[None, None, :] - disparity.data[:, 0]  # (n, h, w)
    x0 = np.floor(src).astype(np.intp)
    f = src - x0  # in [0, 1)
    x1 = x0 + 1
    v0 = (x0 >= 0) & (x0 < w)
    v1 = (x1 >= 0) & (x1 < w)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x1, 0, w - 1)

    idx0 = x0c[:, None].repeat(c, axis=1)
    idx1 = x1c[:, None].repeat(c, axis=1)
    i0 = np.take_along_axis(img.data, idx0, axis=3) * v0[:, None]
    i1 = np.take_along_axis(img.data, idx1, axis=3) * v1[:, None]
    fb = f[:, None]
    out = (1.0 - fb) * i0 + fb * i1
    out_t = Tensor(out)

    def bwd(g):
        gimg = None
        if img.requires_grad:
            gimg = np.zeros_like(img.data)
            np.add.at(gimg, (np.arange(n)[:, None, None, None],
                             np.arange(c)[None, :, None, None],
                             np.arange(h)[None, None, :, None],
                             idx0), g * (1.0 - fb) * v0[:, None])
            np.add.at(gimg, (np.arange(n)[:, None, None, None],
                             np.arange(c)[None, :, None, None],
                             np.arange(h)[None, None, :, None],
                             idx1), g * fb * v1[:, None])
        gdisp = None
        if disparity.requires_grad:
            # d out / d src = i1 - i0 ; d src / d disparity = -1
            gdisp = -(g * (i1 - i0)).sum(axis=1, keepdims=True)
        return gimg, gdisp

    return record(out_t, (img, disparity), bwd)


# ---------------------------------------------------------------------------
# End-point error


def epe(pred: Tensor, gt: Tensor, valid_mask: Tensor | None = None) -> Tensor:
    """Mean absolute disparity error over valid pixels (scalar tensor)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"epe: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.shape[1] != 1:
        raise ShapeError(f"epe expects single-channel maps, got {pred.shape[1]} channels")
    diff = abs_val(sub(pred, gt))
    if valid_mask is None:
        count = float(np.prod(pred.shape))
        total = sum_all(diff)
    else:
        if valid_mask.shape != pred.shape:
            raise ShapeError(
                f"valid_mask shape {valid_mask.shape} != pred shape {pred.shape}"
            )
        count = float(valid_mask.data.sum())
        if count == 0:
            raise EvaluationError("epe: empty valid mask")
        total = sum_all(mul(diff, valid_mask))
    return scalar_mul(total, 1.0 / count)


def avg_downsample(x: Tensor, factor: int) -> Tensor:
    """Average-pool downsample by an integer factor (exact block mean)."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ConfigError(f"dims {h}x{w} not divisible by downsample factor {factor}")
    return pool2d(x, "avg", k=factor, stride=factor, pad=0)


def multiscale_epe(preds: Sequence[tuple[Tensor, int]], gt: Tensor,
                   weights: Sequence[float]) -> Tensor:
    """Weighted sum of per-scale end-point errors.

    Each prediction comes with its downsampling factor relative to gt;
    gt is average-pooled to that scale and its disparity values divided
    by the factor (disparities shrink with resolution).
    """
    if len(preds) != len(weights):
        raise ConfigError(f"{len(preds)} predictions but {len(weights)} weights")
    if not preds:
        raise ConfigError("multiscale_epe needs at least one prediction")
    total = None
    gh, gw = gt.shape[2], gt.shape[3]
    for (pred, scale), wgt in zip(preds, weights):
        if scale < 1 or gh % scale or gw % scale:
            raise ConfigError(f"scale {scale} incompatible with gt dims {gh}x{gw}")
        if pred.shape[2:] != (gh // scale, gw // scale):
            raise ConfigError(
                f"prediction shape {pred.shape} does not match gt at scale {scale}"
            )
        gt_s = avg_downsample(gt, scale)
        if scale > 1:
            gt_s = scalar_mul(gt_s, 1.0 / scale)
        term = scalar_mul(epe(pred, gt_s), float(wgt))
        total = term if total is None else add(total, term)
    return total
