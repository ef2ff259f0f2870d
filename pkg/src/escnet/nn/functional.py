"""Differentiable operations on :class:`~escnet.nn.tensor.Tensor`.

Layout is NCHW throughout. Elementwise ops require identical shapes; the only
broadcasts are bias-add and per-channel affine inside the layer ops.
GEMMs run in the storage dtype; batch statistics, pooling means and the loss
are accumulated in float64.
"""
from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_node


_KINKS: list | None = None


@contextlib.contextmanager
def trace_kinks() -> Iterator[list]:
    """Collect the activation pattern (ReLU masks, max-pool argmaxes) of the ops run inside.

    Two forward passes with equal patterns lie on the same smooth piece of a
    piecewise-smooth network, which is what a finite-difference check needs.
    """
    global _KINKS
    old = _KINKS
    _KINKS = []
    try:
        yield _KINKS
    finally:
        _KINKS = old


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _out_size(size: int, k: int, s: int, p: int, op: str) -> int:
    span = size + 2 * p - k
    if span < 0:
        raise ShapeError(f"{op}: kernel {k} larger than padded input {size + 2 * p}")
    return span // s + 1


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.full(a.shape, b, dtype=a.dtype))
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINKS is not None:
        _KINKS.append(mask)
    out = np.where(mask, x.data, x.dtype.type(0))
    return make_node(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    half = x.dtype.type(0.5)
    out = half * (1 + np.tanh(half * x.data))
    return make_node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


# -- reductions and reshapes -------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    shape = x.shape
    return make_node(out, (x,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    shape = x.shape
    return make_node(out, (x,), lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# -- layers ------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ wd, g.T @ xd, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "linear")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation with zero padding. Output size uses floor division."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Ho = _out_size(H, kh, sh, ph, "conv2d")
    Wo = _out_size(W, kw, sw, pw, "conv2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    Hp, Wp = xp.shape[2:]
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, :, : sh * (Ho - 1) + 1 : sh, : sw * (Wo - 1) + 1 : sw]).reshape(N, C, Ho * Wo)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, C * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(O, -1)
    out = np.matmul(wmat, cols).reshape(N, O, Ho, Wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gm = g.reshape(N, O, Ho * Wo)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gm)
            dxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
            if kh == 1 and kw == 1:
                dxp[:, :, : sh * (Ho - 1) + 1 : sh, : sw * (Wo - 1) + 1 : sw] = dcols.reshape(N, C, Ho, Wo)
            else:
                d6 = dcols.reshape(N, C, kh, kw, Ho, Wo)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += d6[:, :, i, j]
            gx = dxp[:, :, ph : ph + H, pw : pw + W]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, stride=1, padding=0) -> Tensor:
    """Per-channel spatial convolution; weight has shape C x 1 x kh x kw."""
    N, C, H, W = x.shape
    if weight.ndim != 4 or weight.shape[0] != C or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight {weight.shape} does not match {C} channels")
    kh, kw = weight.shape[2:]
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Ho = _out_size(H, kh, sh, ph, "depthwise_conv2d")
    Wo = _out_size(W, kw, sw, pw, "depthwise_conv2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    wd = weight.data[:, 0]

    def window(arr, i, j):
        return arr[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw]

    out = np.zeros((N, C, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += window(xp, i, j) * wd[:, i, j][None, :, None, None]

    def backward(g):
        gw = np.empty_like(wd)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gw[:, i, j] = np.einsum("nchw,nchw->c", g, window(xp, i, j))
                window(dxp, i, j)[...] += g * wd[:, i, j][None, :, None, None]
        gx = dxp[:, :, ph : ph + H, pw : pw + W]
        return gx, gw[:, None]

    return make_node(out, (x, weight), backward, "depthwise_conv2d")


def depthwise_separable_conv2d(x: Tensor, depthwise_weight: Tensor, pointwise_weight: Tensor,
                               stride=1, padding=0) -> Tensor:
    """Depthwise spatial convolution followed by a 1x1 channel-mixing convolution."""
    if pointwise_weight.ndim != 4 or pointwise_weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise weight must be O x C x 1 x 1, got {pointwise_weight.shape}")
    return conv2d(depthwise_conv2d(x, depthwise_weight, stride, padding), pointwise_weight)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place (unbiased variance, PyTorch convention).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d: expected N x C x H x W, got {x.shape}")
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm2d: affine parameters must have shape ({C},)")
    xd = x.data
    dt = xd.dtype
    if training:
        m = N * H * W
        if m == 0:
            raise ShapeError("batch_norm2d: empty batch in training mode")
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        centered = xd - mu.astype(dt)[None, :, None, None]
        var = np.einsum("nchw,nchw->c", centered, centered, dtype=np.float64) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        unbiased = var * m / (m - 1) if m > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        centered = xd - mu.astype(dt)[None, :, None, None]
    invstd = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = centered * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64)
        ggamma = np.einsum("nchw,nchw->c", g, xhat, dtype=np.float64)
        gx = None
        if x.requires_grad:
            scale_c = (gamma.data * invstd)[None, :, None, None]
            if training:
                m = N * H * W
                gx = scale_c * (g - (gbeta / m).astype(dt)[None, :, None, None]
                                - xhat * (ggamma / m).astype(dt)[None, :, None, None])
            else:
                gx = g * scale_c
        return gx, ggamma.astype(dt), gbeta.astype(dt)

    return make_node(out, (x, gamma, beta), backward, "batch_norm2d")


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    N, C, H, W = x.shape
    k, s, p = int(kernel), int(stride), int(padding)
    Ho = _out_size(H, k, s, p, "max_pool2d")
    Wo = _out_size(W, k, s, p, "max_pool2d")
    if p:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    else:
        xp = x.data
    Hp, Wp = xp.shape[2:]

    def window(arr, i, j):
        return arr[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]

    # first maximum wins on ties
    out = window(xp, 0, 0).copy()
    idx = np.zeros(out.shape, dtype=np.int16)
    for q in range(1, k * k):
        cand = window(xp, *divmod(q, k))
        better = cand > out
        out[better] = cand[better]
        idx[better] = q
    if _KINKS is not None:
        _KINKS.append(idx)

    def backward(g):
        dxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
        for q in range(k * k):
            window(dxp, *divmod(q, k))[...] += np.where(idx == q, g, 0)
        return (dxp[:, :, p : p + H, p : p + W],)

    return make_node(out, (x,), backward, "max_pool2d")


def global_avg_pool2d(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)
    inv = x.dtype.type(1.0 / (H * W))
    return make_node(out, (x,), lambda g: (np.broadcast_to(g * inv, (N, C, H, W)).copy(),), "global_avg_pool2d")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, labels])
    probs = np.exp(z - logsum[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return ((d * (float(g) / n)).astype(logits.dtype),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")
