"""Differentiable operations on :class:`~dpif.tensor.Tensor`.

All image tensors are N,H,W,C. Convolution kernels are Kh,Kw,Ci,Co. Apart
from bias-over-channels, operands must have identical shapes.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dpif.tensor import Parameter, ShapeError, Tensor, make_result

ACTIVATIONS = ("tanh", "relu")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise / structural
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return make_result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def scale(a: Tensor, factor: float) -> Tensor:
    if isinstance(factor, Tensor):
        raise TypeError("scale takes a Python scalar factor")
    f = float(factor)
    return make_result(a.data * a.data.dtype.type(f), "scale", (a,),
                       lambda g: (g * g.dtype.type(f),))


def total(a: Tensor) -> Tensor:
    return make_result(np.asarray(a.data.sum()), "sum", (a,),
                       lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return make_result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the batch axis (row-major)."""
    return reshape(a, (a.shape[0], -1))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        y = np.tanh(x.data)
        return make_result(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "relu":
        # subgradient 1 at zero so a zero-initialized layer feeding a relu still learns
        mask = x.data >= 0
        y = np.where(x.data > 0, x.data, x.data.dtype.type(0))
        return make_result(y, "relu", (x,), lambda g: (g * mask,))
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(low, high) padding so the output extent is ceil(size / stride).

    When the total is odd the extra row/column goes on the low side.
    """
    out = math.ceil(size / stride)
    total_pad = max(0, (out - 1) * stride + kernel - size)
    high = total_pad // 2
    return total_pad - high, high


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(size / stride)
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pad_amounts(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        return same_padding(h, kh, stride), same_padding(w, kw, stride)
    if padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w} with valid padding")
        return (0, 0), (0, 0)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # windows: N, H', W', C, kh, kw  ->  N*ho*wo, kh*kw*C
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    n, c = xp.shape[0], xp.shape[3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols


def _col2im(dcols: np.ndarray, padded_shape, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    n, hp, wp, c = padded_shape
    d = dcols.reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride, :] += d[:, :, :, i, j, :]
    return dx


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: str):
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    (pt, pb), (pl, pr) = _pad_amounts(h, wd, kh, kw, stride, padding)
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if kh == 1 and kw == 1 and stride == 1 and padding in ("same", "valid"):
        cols = x.reshape(n * h * wd, ci)
        xp_shape = x.shape
    else:
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        xp_shape = xp.shape
    out = cols @ w.reshape(kh * kw * ci, co)
    return out.reshape(n, ho, wo, co), cols, xp_shape, (pt, pl), (ho, wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D convolution (cross-correlation) in N,H,W,C layout."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects input [N,H,W,Ci] and kernel [Kh,Kw,Ci,Co], "
                         f"got {x.shape} and {kernel.shape}")
    if x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d: input channels of {x.shape} do not match kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    co = kernel.shape[3]
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel {kernel.shape}")
    kh, kw, ci, _ = kernel.shape
    out, cols, xp_shape, (pt, pl), (ho, wo) = _conv_forward(x.data, kernel.data, stride, padding)
    if bias is not None:
        out = out + bias.data
    n, h, w = x.shape[:3]

    def backward(g: np.ndarray):
        g2 = g.reshape(-1, co)
        dk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        db = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = g2 @ kernel.data.reshape(kh * kw * ci, co).T
            if kh == 1 and kw == 1 and stride == 1:
                dx = dcols.reshape(x.shape)
            else:
                dxp = _col2im(dcols, xp_shape, kh, kw, stride, ho, wo)
                dx = dxp[:, pt:pt + h, pl:pl + w, :]
        return (dx, dk, db) if bias is not None else (dx, dk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_result(out, "conv2d", parents, backward)


def grouped_conv2d(x: Tensor, kernels: Sequence[Tensor], bias: Tensor | None, n: int,
                   stride: int = 1, padding: str = "same") -> Tensor:
    """Convolution with ``n`` independent filter groups.

    Group g reads input channels [g*Ci/n, (g+1)*Ci/n) and writes output
    channels [g*Co/n, (g+1)*Co/n).
    """
    if n < 1 or len(kernels) != n:
        raise ValueError(f"expected {n} group kernels, got {len(kernels)}")
    ci = x.shape[-1]
    co_g = kernels[0].shape[3]
    co = co_g * n
    if ci % n:
        raise ShapeError(f"grouped_conv2d: {n} groups do not divide {ci} input channels")
    ci_g = ci // n
    for g, k in enumerate(kernels):
        if k.shape[2] != ci_g or k.shape[3] != co_g:
            raise ShapeError(f"grouped_conv2d: group {g} kernel {k.shape} incompatible with "
                             f"input {x.shape} split into {n} groups")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"grouped_conv2d: bias shape {bias.shape} != ({co},)")
    if n == 1:
        return conv2d(x, kernels[0], bias, stride, padding)

    results = [_conv_forward(x.data[..., g * ci_g:(g + 1) * ci_g], k.data, stride, padding)
               for g, k in enumerate(kernels)]
    out = np.concatenate([r[0] for r in results], axis=-1)
    if bias is not None:
        out = out + bias.data
    nb, h, w = x.shape[:3]

    def backward(g: np.ndarray):
        dx = np.zeros_like(x.data) if x.requires_grad else None
        dks = []
        for gi, (k, r) in enumerate(zip(kernels, results)):
            _, cols, xp_shape, (pt, pl), (ho, wo) = r
            kh, kw = k.shape[:2]
            g2 = g[..., gi * co_g:(gi + 1) * co_g].reshape(-1, co_g)
            dks.append((cols.T @ g2).reshape(k.shape) if k.requires_grad else None)
            if dx is not None:
                dcols = g2 @ k.data.reshape(-1, co_g).T
                if kh == 1 and kw == 1 and stride == 1:
                    dx[..., gi * ci_g:(gi + 1) * ci_g] = dcols.reshape(nb, h, w, ci_g)
                else:
                    dxp = _col2im(dcols, xp_shape, kh, kw, stride, ho, wo)
                    dx[..., gi * ci_g:(gi + 1) * ci_g] = dxp[:, pt:pt + h, pl:pl + w, :]
        out_grads = [dx, *dks]
        if bias is not None:
            out_grads.append(g.reshape(-1, co).sum(axis=0) if bias.requires_grad else None)
        return out_grads

    parents = (x, *kernels) + ((bias,) if bias is not None else ())
    return make_result(out, "grouped_conv2d", parents, backward)


# --------------------------------------------------------------------------
# pooling / normalization
# --------------------------------------------------------------------------

def maxpool2d(x: Tensor, window: int, stride: int, padding: str = "valid") -> Tensor:
    """Max pooling; ties route the gradient to the first row-major position."""
    n, h, w, c = x.shape
    if padding == "valid" and (window > h or window > w):
        raise ShapeError(f"maxpool2d: window {window} exceeds spatial extent {h}x{w}")
    (pt, pb), (pl, pr) = _pad_amounts(h, w, window, window, stride, padding)
    ho = conv_output_size(h, window, stride, padding)
    wo = conv_output_size(w, window, stride, padding)
    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    win = sliding_window_view(xp, (window, window), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    flat = win.reshape(n, ho, wo, c, window * window)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        di, dj = np.divmod(arg, window)
        ni, hi, wi, ci = np.indices(arg.shape, sparse=True)
        np.add.at(dxp, (ni, hi * stride + di, wi * stride + dj, ci), g)
        return (dxp[:, pt:pt + h, pl:pl + w, :],)

    return make_result(out, "maxpool2d", (x,), backward)


def batchnorm_inference(x: Tensor, mean: Tensor, var: Tensor, gamma: Tensor, beta: Tensor,
                        eps: float = 1.001e-5) -> Tensor:
    """Per-channel affine normalization using stored statistics."""
    c = x.shape[-1]
    for name, t in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm: {name} shape {t.shape} != ({c},)")
    mult = gamma.data / np.sqrt(var.data + eps)
    shift = beta.data - mean.data * mult
    out = x.data * mult.astype(x.dtype) + shift.astype(x.dtype)
    return make_result(out, "batchnorm", (x,), lambda g: (g * mult.astype(g.dtype),))


# --------------------------------------------------------------------------
# dense and losses
# --------------------------------------------------------------------------

def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    u = weights.shape[1]
    if bias is not None and bias.shape != (u,):
        raise ShapeError(f"dense: bias {bias.shape} != ({u},)")
    out = x.data @ weights.data
    if bias is not None:
        out = out + bias.data

    def backward(g: np.ndarray):
        dx = g @ weights.data.T if x.requires_grad else None
        dw = x.data.T @ g if weights.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, (g.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weights) if bias is None else (x, weights, bias)
    return make_result(out, "dense", parents, backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross-entropy of one-hot ``labels`` under softmax(logits)."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if logits.ndim != 2 or y.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {y.shape}")
    y = y.astype(logits.dtype)
    logp = log_softmax(logits.data)
    n = logits.shape[0]
    loss = -(y * logp).sum() / n

    def backward(g: np.ndarray):
        p = np.exp(logp)
        return (g * (p * y.sum(axis=1, keepdims=True) - y) / n,)

    return make_result(np.asarray(loss, dtype=logits.dtype), "softmax_cross_entropy",
                       (logits,), backward)


def sum_squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Sum over all elements of (a - b)^2."""
    _check_same_shape("sum_squared_error", a, b)
    diff = a.data - b.data
    return make_result(np.asarray((diff * diff).sum()), "sum_squared_error", (a, b),
                       lambda g: (2.0 * g * diff, -2.0 * g * diff))


def one_hot(labels: Sequence[int], num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def parameter_count(params: Sequence[Parameter]) -> int:
    return int(sum(p.data.size for p in params))
