"""Differentiable primitives over :class:`~pamt.autodiff.tensor.Tensor`.

Mathematical set: matrix multiply, 2-D convolution (stride 1 or 2, zero
padding), 2x2 average pooling, ReLU, sigmoid, tanh, softmax over an axis,
global average pooling, elementwise add/multiply (numpy broadcasting, with
gradients sum-reduced over broadcast axes), channel-wise scaling of feature
maps, mean/max reduction over the instance axis, and binary cross-entropy
with logits.  Structural plumbing: reshape, transpose, stack, sum.

Every primitive checks its output for NaN/Inf and raises
:class:`~pamt.errors.NonFiniteError` naming itself; shape problems raise
:class:`~pamt.errors.ShapeMismatchError`.  Backward closures only compute
gradients for parents that require them, so e.g. a convolution over frozen
weights skips the weight-gradient GEMM entirely.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NonFiniteError, ShapeMismatchError
from .tensor import Tensor


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``g`` over axes that were broadcast relative to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape) from None

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _result(data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatchError("sub", a.shape, b.shape) from None

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(g, b.data.shape))

    return _result(data, "sub", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _result(-a.data, "neg", (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul", a.shape, b.shape) from None

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _result(data, "mul", (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _result(data, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape, detail="expects a matrix")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(g.T))

    return _result(np.ascontiguousarray(a.data.T), "transpose", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, shape) from None

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _result(np.asarray(data, order="C"), "reshape", (a,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeMismatchError("stack", (), detail="no tensors to stack")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise ShapeMismatchError("stack", base, t.shape)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g: np.ndarray) -> None:
        slabs = np.moveaxis(g, axis, 0)
        for t, slab in zip(tensors, slabs):
            if t.requires_grad:
                t.accumulate_grad(np.ascontiguousarray(slab))

    return _result(data, "stack", tensors, backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    return _result(data, "relu", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # 0.5*(1+tanh(x/2)) is overflow-safe for large |x|
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * data * (1.0 - data))

    return _result(data, "sigmoid", (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - data * data))

    return _result(data, "tanh", (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            a.accumulate_grad(data * (g - inner))

    return _result(data, "softmax", (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _result(data, "sum", (a,), backward)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the instance axis: (M, D) -> (D,)."""
    if a.ndim != 2:
        raise ShapeMismatchError("mean_rows", a.shape, detail="expects (M, D)")
    m = a.shape[0]
    data = a.data.mean(axis=0)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g / m, a.data.shape).copy())

    return _result(data, "mean_rows", (a,), backward)


def max_rows(a: Tensor) -> Tensor:
    """Max over the instance axis: (M, D) -> (D,).

    Subgradient routes to the argmax entry of each column; ties break toward
    the lowest row index (numpy argmax convention).
    """
    if a.ndim != 2:
        raise ShapeMismatchError("max_rows", a.shape, detail="expects (M, D)")
    idx = a.data.argmax(axis=0)
    data = a.data[idx, np.arange(a.shape[1])]

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[idx, np.arange(a.data.shape[1])] = g
            a.accumulate_grad(ga)

    return _result(data, "max_rows", (a,), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C), spatial mean per channel."""
    if a.ndim != 4:
        raise ShapeMismatchError("global_avg_pool", a.shape, detail="expects (N, C, H, W)")
    n, c, h, w = a.shape
    data = a.data.mean(axis=(2, 3))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g[:, :, None, None] / (h * w), a.data.shape).copy())

    return _result(data, "global_avg_pool", (a,), backward)


def scale_channels(fmap: Tensor, vec: Tensor) -> Tensor:
    """Channel-wise multiply: broadcast a length-C vector over (N, C, H, W).

    ``vec`` is either (C,) shared across the batch or (N, C) per sample.
    Multiplying by an all-ones vector is bit-exact identity.
    """
    if fmap.ndim != 4:
        raise ShapeMismatchError("scale_channels", fmap.shape, detail="feature map must be (N, C, H, W)")
    n, c = fmap.shape[:2]
    if vec.ndim == 1:
        if vec.shape[0] != c:
            raise ShapeMismatchError("scale_channels", fmap.shape, vec.shape)
        v4 = vec.data[None, :, None, None]
    elif vec.ndim == 2:
        if vec.shape != (n, c):
            raise ShapeMismatchError("scale_channels", fmap.shape, vec.shape)
        v4 = vec.data[:, :, None, None]
    else:
        raise ShapeMismatchError("scale_channels", fmap.shape, vec.shape)
    data = fmap.data * v4

    def backward(g: np.ndarray) -> None:
        if fmap.requires_grad:
            fmap.accumulate_grad(g * v4)
        if vec.requires_grad:
            gv = (g * fmap.data).sum(axis=(2, 3))
            if vec.ndim == 1:
                gv = gv.sum(axis=0)
            vec.accumulate_grad(gv)

    return _result(data, "scale_channels", (fmap, vec), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    x: (N, C_in, H, W), weight: (C_out, C_in, kH, kW), bias: (C_out,).
    """
    if stride not in (1, 2):
        raise ShapeMismatchError("conv2d", x.shape, weight.shape, detail=f"stride {stride} unsupported")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, weight.shape)
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    p, s = int(padding), int(stride)
    hp, wp = h + 2 * p, w + 2 * p
    if hp < kh or wp < kw:
        raise ShapeMismatchError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatchError("conv2d", bias.shape, (cout,), detail="bias")
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    saved_cols = cols if weight.requires_grad else None

    def backward(g: np.ndarray) -> None:
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if weight.requires_grad:
            weight.accumulate_grad((gmat.T @ saved_cols).reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((n, cin, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho * s:s, j:j + wo * s:s] += gcols[..., i, j]
            x.accumulate_grad(gxp[:, :, p:p + h, p:p + w] if p else gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv2d", parents, backward)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero padding of the last two axes by ``pad`` on every side."""
    if x.ndim < 2:
        raise ShapeMismatchError("pad2d", x.shape, detail="needs at least 2 axes")
    if pad < 0:
        raise ShapeMismatchError("pad2d", x.shape, detail=f"negative pad {pad}")
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g[sl]))

    return _result(np.pad(x.data, width), "pad2d", (x,), backward)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; trailing odd row/column is dropped."""
    if x.ndim != 4:
        raise ShapeMismatchError("avg_pool2d", x.shape, detail="expects (N, C, H, W)")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeMismatchError("avg_pool2d", x.shape, detail="spatial size below 2x2")
    xe = x.data[:, :, : 2 * ho, : 2 * wo]
    data = xe.reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            view = gx[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2)
            view += (g * 0.25)[:, :, :, None, :, None]
            x.accumulate_grad(gx)

    return _result(data, "avg_pool2d", (x,), backward)


def bce_with_logits(logit: Tensor, target: float) -> Tensor:
    """Numerically stable binary cross-entropy on a scalar logit.

    loss = max(z, 0) - z*y + log(1 + exp(-|z|)); d(loss)/dz = sigmoid(z) - y.
    """
    if logit.size != 1:
        raise ShapeMismatchError("bce_with_logits", logit.shape, detail="expects a scalar logit")
    y = float(target)
    if y not in (0.0, 1.0):
        raise ShapeMismatchError("bce_with_logits", (), detail=f"label must be 0 or 1, got {y}")
    z = float(logit.data)
    data = np.asarray(max(z, 0.0) - z * y + np.log1p(np.exp(-abs(z))))

    def backward(g: np.ndarray) -> None:
        if logit.requires_grad:
            p = 0.5 * (1.0 + np.tanh(0.5 * z))
            logit.accumulate_grad((float(g) * (p - y)) * np.ones_like(logit.data))

    return _result(data, "bce_with_logits", (logit,), backward)
