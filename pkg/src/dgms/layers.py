"""Plain numpy layer numerics (NCHW).  The autodiff ops wrap these."""
from __future__ import annotations

import numpy as np


def dense_forward(x, W, bias=None):
    x = np.asarray(x)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"dense: input {x.shape} incompatible with weight {W.shape}")
    y = x @ W.T
    if bias is not None:
        y = y + bias
    return y


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh: int, kw: int, stride: int, pad: int):
    """Patches of ``x`` as a ``(N*OH*OW, C*kh*kw)`` matrix (column order c, i, j)."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw), oh, ow


def col2im(cols, x_shape, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def conv2d_forward(x, W, bias=None, stride: int = 1, pad: int = 0):
    x = np.asarray(x)
    if x.ndim != 4 or W.ndim != 4 or x.shape[1] != W.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {W.shape}")
    co, _, kh, kw = W.shape
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    cols, oh, ow = im2col(x, kh, kw, stride, pad)
    y = cols @ W.reshape(co, -1).T
    if bias is not None:
        y = y + bias
    return y.reshape(x.shape[0], oh, ow, co).transpose(0, 3, 1, 2)


def conv2d_naive(x, W, bias=None, stride: int = 1, pad: int = 0):
    """Six nested loops; the reference the fast path is checked against."""
    n, c, h, w = x.shape
    co, ci, kh, kw = W.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    y = np.zeros((n, co, oh, ow), dtype=np.result_type(x, W))
    for b in range(n):
        for o in range(co):
            for p in range(oh):
                for q in range(ow):
                    acc = 0.0 if bias is None else bias[o]
                    for ch in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                r, s = p * stride - pad + i, q * stride - pad + j
                                if 0 <= r < h and 0 <= s < w:
                                    acc += x[b, ch, r, s] * W[o, ch, i, j]
                    y[b, o, p, q] = acc
    return y


def batchnorm_forward(x, scale, shift, mean, var, eps: float = 1e-5):
    """Inference-mode batchnorm over channel axis 1 using the given statistics."""
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean.reshape(shape)) * (scale * inv).reshape(shape) + shift.reshape(shape)


def relu(x):
    return np.maximum(x, 0)


def avgpool(x, k: int):
    """Non-overlapping ``k x k`` average pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    if k < 1 or k > h or k > w:
        raise ValueError(f"avgpool: window {k} does not fit input {h}x{w}")
    oh, ow = h // k, w // k
    return x[:, :, :oh * k, :ow * k].reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))
