"""Forward operations with their backward rules.

Every function takes and returns :class:`~lsw.tensor.Tensor` objects and
records itself on the active tape when an input requires a gradient.
Convolution and affine products accumulate in float64 and store the result
in the input dtype.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from lsw import kernels
from lsw.tensor import Tensor, maybe_record

LOG_CLAMP = 1e-7

_AXES = ("depth", "height", "width")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _triple(v, what: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ShapeError(f"{what} needs 3 extents, got {v!r}")
    return t


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.dtype for t in tensors))


def conv_output_shape(in_dhw, kernel, stride, padding) -> tuple[int, int, int]:
    """Output extents of a 3D cross-correlation; raises on empty output."""
    out = []
    for axis, n, k, s, p in zip(_AXES, in_dhw, kernel, stride, padding):
        if s < 1:
            raise ShapeError(f"{axis} stride must be positive, got {s}")
        if p < 0:
            raise ShapeError(f"{axis} padding must be non-negative, got {p}")
        if k > n + 2 * p:
            raise ShapeError(f"{axis}: kernel extent {k} exceeds padded input extent {n + 2 * p}")
        o = (n + 2 * p - k) // s + 1
        if o < 1:
            raise ShapeError(f"{axis}: zero-extent output")
        out.append(o)
    return tuple(out)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """3D cross-correlation of [N,C,D,H,W] with [F,C,kd,kh,kw] plus bias [F]."""
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-D [N,C,D,H,W], got shape {x.shape}")
    if weight.data.ndim != 5:
        raise ShapeError(f"conv3d kernel must be 5-D [F,C,kd,kh,kw], got shape {weight.shape}")
    n, c = x.shape[:2]
    f, kc = weight.shape[:2]
    if kc != c:
        raise ShapeError(f"channel axis: kernel expects {kc} input channels, input has {c}")
    if bias.shape != (f,):
        raise ShapeError(f"bias must have shape ({f},), got {bias.shape}")
    kernel = weight.shape[2:]
    out_dhw = conv_output_shape(x.shape[2:], kernel, stride, padding)

    pd, ph, pw = padding
    xp = x.data
    if any(padding):
        xp = np.pad(xp, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    cols = kernels.im2col(xp, kernel, stride, out_dhw)
    ck = cols.shape[2]
    cols2 = cols.reshape(-1, ck)
    wmat = weight.data.reshape(f, ck).astype(np.float64)
    out64 = cols2 @ wmat.T
    out64 += bias.data.astype(np.float64)
    p = int(np.prod(out_dhw))
    dtype = _result_dtype(x, weight, bias)
    out = out64.reshape(n, p, f).transpose(0, 2, 1).reshape(n, f, *out_dhw).astype(dtype)
    out_t = Tensor(out, dtype=dtype)

    xp_shape = xp.shape
    in_shape = x.shape

    def _backward(g):
        g2 = np.ascontiguousarray(g.reshape(n, f, p).transpose(0, 2, 1), dtype=np.float64).reshape(n * p, f)
        dw = (g2.T @ cols2).reshape(weight.shape).astype(weight.dtype)
        db = g2.sum(axis=0).astype(bias.dtype)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, p, ck)
            dxp = kernels.col2im(dcols, xp_shape, kernel, stride, out_dhw)
            dx = dxp[:, :, pd : pd + in_shape[2], ph : ph + in_shape[3], pw : pw + in_shape[4]].astype(x.dtype)
        return dx, dw, db

    return maybe_record("conv3d", (x, weight, bias), out_t, _backward)


def pool_output_shape(in_dhw, window, stride) -> tuple[int, int, int]:
    out = []
    for axis, n, k, s in zip(_AXES, in_dhw, window, stride):
        if s < 1:
            raise ShapeError(f"{axis} stride must be positive, got {s}")
        if k < 1 or k > n:
            raise ShapeError(f"{axis}: pooling window {k} does not fit input extent {n}")
        out.append((n - k) // s + 1)
    return tuple(out)


def maxpool3d(x: Tensor, window, stride=None) -> Tensor:
    """Max pooling over (depth, height, width); stride defaults to the window.

    The gradient goes to the first maximal element in linear-index order.
    """
    window = _triple(window, "window")
    stride = window if stride is None else _triple(stride, "stride")
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d input must be 5-D [N,C,D,H,W], got shape {x.shape}")
    out_dhw = pool_output_shape(x.shape[2:], window, stride)
    out, argidx = kernels.maxpool_forward(x.data, window, stride, out_dhw)
    out_t = Tensor(out, dtype=x.dtype)
    in_shape = x.shape

    def _backward(g):
        return (kernels.maxpool_backward(np.asarray(g, dtype=x.dtype), argidx, in_shape),)

    return maybe_record("maxpool3d", (x,), out_t, _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes: [N,C,...] -> [N,C]."""
    if x.data.ndim < 3:
        raise ShapeError(f"global_avg_pool needs [N,C,...], got shape {x.shape}")
    n, c = x.shape[:2]
    count = int(np.prod(x.shape[2:]))
    out = Tensor(x.data.reshape(n, c, count).mean(axis=2, dtype=np.float64).astype(x.dtype), dtype=x.dtype)
    in_shape = x.shape

    def _backward(g):
        dx = np.broadcast_to((g / count).reshape(n, c, *([1] * (len(in_shape) - 2))), in_shape)
        return (np.array(dx, dtype=x.dtype),)

    return maybe_record("global_avg_pool", (x,), out, _backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x [N,K], weight [K,M], bias [M]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"affine needs 2-D operands, got {x.shape} and {weight.shape}")
    k, m = weight.shape
    if x.shape[1] != k:
        raise ShapeError(f"inner extent mismatch: input has {x.shape[1]}, weight expects {k}")
    if bias.shape != (m,):
        raise ShapeError(f"bias must have shape ({m},), got {bias.shape}")
    x64 = x.data.astype(np.float64)
    w64 = weight.data.astype(np.float64)
    dtype = _result_dtype(x, weight, bias)
    out = Tensor((x64 @ w64 + bias.data).astype(dtype), dtype=dtype)

    def _backward(g):
        g64 = np.asarray(g, dtype=np.float64)
        dx = (g64 @ w64.T).astype(x.dtype) if x.requires_grad else None
        return dx, (x64.T @ g64).astype(weight.dtype), g64.sum(axis=0).astype(bias.dtype)

    return maybe_record("affine", (x, weight, bias), out, _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype), dtype=x.dtype)
    return maybe_record("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) in the storage dtype."""
    v = x.data.astype(np.float64)
    e = np.exp(-np.abs(v))
    p64 = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    info = np.finfo(x.dtype)
    p = np.clip(p64.astype(x.dtype), info.tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)))
    out = Tensor(p, dtype=x.dtype)
    return maybe_record("sigmoid", (x,), out, lambda g: (g * p * (1 - p),))


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)
    in_shape = x.shape
    return maybe_record("reshape", (x,), out, lambda g: (g.reshape(in_shape),))


def sum(x: Tensor, weights=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Scalar ``sum(x * weights)``; ``weights`` is a constant array."""
    if weights is None:
        w = None
        val = x.data.sum(dtype=np.float64)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape)
        val = (x.data * w).sum(dtype=np.float64)
    out = Tensor(np.asarray(val, dtype=x.dtype), dtype=x.dtype)

    def _backward(g):
        scale = float(np.asarray(g).reshape(()))
        if w is None:
            return (np.full(x.shape, scale, dtype=x.dtype),)
        return ((w * scale).astype(x.dtype),)

    return maybe_record("sum", (x,), out, _backward)


class LossValue(Tensor):
    """Scalar loss tensor that remembers its reduction."""

    __slots__ = ("reduction",)

    def __init__(self, value, reduction: str):
        super().__init__(np.asarray(value, dtype=np.float64), dtype=np.float64)
        self.reduction = reduction

    @property
    def value(self) -> float:
        return self.item()


def bce_loss(pred: Tensor, label, reduction: str = "mean", clamp: float = LOG_CLAMP) -> LossValue:
    """Binary cross-entropy ``-[y log p + (1-y) log(1-p)]`` on clamped predictions."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    y = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64)
    p_raw = pred.data.astype(np.float64)
    if y.shape != p_raw.shape:
        raise ShapeError(f"label shape {y.shape} does not match prediction shape {p_raw.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(p_raw, clamp, 1.0 - clamp)
    terms = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    total = terms.sum()
    scale = 1.0 / terms.size if reduction == "mean" else 1.0
    out = LossValue(total * scale, reduction)
    inside = (p_raw >= clamp) & (p_raw <= 1.0 - clamp)

    def _backward(g):
        dp = (p - y) / (p * (1.0 - p)) * inside * (scale * float(np.asarray(g).reshape(())))
        return (dp.astype(pred.dtype),)

    return maybe_record("bce_loss", (pred,), out, _backward)
