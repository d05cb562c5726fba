"""Convolutional building blocks with explicit forward/backward passes.

All tensors are float64 (N, C, H, W). Layers are stateless between passes:
``forward`` returns (output, cache) and ``backward(dy, cache)`` returns the
input gradient while accumulating parameter gradients into ``.gw`` / ``.gb``,
so one layer instance can run several forward passes (e.g. a discriminator
on real and fake pairs) before any backward. Convolutions use zero padding;
weights initialise from a seeded zero-mean normal.
"""

from __future__ import annotations

import numpy as np


def im2col(x: np.ndarray, k: int, stride: int, pad: int, dilation: int = 1) -> np.ndarray:
    """Unfold (N, C, H, W) into (N, C*k*k, OH*OW) patch columns."""
    n, c, h, w = x.shape
    span = (k - 1) * dilation + 1
    oh = (h + 2 * pad - span) // stride + 1
    ow = (w + 2 * pad - span) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, oh, ow))
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r0:r0 + (oh - 1) * stride + 1:stride,
                                  c0:c0 + (ow - 1) * stride + 1:stride]
    return cols.reshape(n, c * k * k, oh * ow)


def col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int,
           dilation: int = 1) -> np.ndarray:
    """Scatter-add patch columns back to (N, C, H, W); adjoint of im2col."""
    n, c, h, w = x_shape
    span = (k - 1) * dilation + 1
    oh = (h + 2 * pad - span) // stride + 1
    ow = (w + 2 * pad - span) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    grid = cols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            xp[:, :, r0:r0 + (oh - 1) * stride + 1:stride,
               c0:c0 + (ow - 1) * stride + 1:stride] += grid[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


class Conv2d:
    """k x k convolution, zero-padded, with stride and dilation."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0,
                 dilation: int = 1, *, rng: np.random.Generator, w_std: float = 0.02):
        self.k, self.stride, self.pad, self.dilation = k, stride, pad, dilation
        self.in_ch, self.out_ch = in_ch, out_ch
        self.w = rng.normal(0.0, w_std, (out_ch, in_ch, k, k))
        self.b = np.zeros(out_ch)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        span = (self.k - 1) * self.dilation + 1
        return ((h + 2 * self.pad - span) // self.stride + 1,
                (w + 2 * self.pad - span) // self.stride + 1)

    def forward(self, x: np.ndarray):
        n = x.shape[0]
        oh, ow = self.out_size(x.shape[2], x.shape[3])
        cols = im2col(x, self.k, self.stride, self.pad, self.dilation)
        y = np.matmul(self.w.reshape(self.out_ch, -1), cols).reshape(n, self.out_ch, oh, ow)
        y += self.b[None, :, None, None]
        return y, (x.shape, cols)

    def backward(self, dy: np.ndarray, cache):
        x_shape, cols = cache
        n = dy.shape[0]
        dyf = dy.reshape(n, self.out_ch, -1)
        self.gw += np.einsum("nof,nkf->ok", dyf, cols).reshape(self.w.shape)
        self.gb += dy.sum(axis=(0, 2, 3))
        dcols = np.matmul(self.w.reshape(self.out_ch, -1).T, dyf)
        return col2im(dcols, x_shape, self.k, self.stride, self.pad, self.dilation)


class ConvTranspose2d:
    """k x k transposed convolution; output is (H-1)*stride + k - 2*pad."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 2, pad: int = 1,
                 *, rng: np.random.Generator, w_std: float = 0.02):
        self.k, self.stride, self.pad = k, stride, pad
        self.in_ch, self.out_ch = in_ch, out_ch
        self.w = rng.normal(0.0, w_std, (in_ch, out_ch, k, k))
        self.b = np.zeros(out_ch)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        return ((h - 1) * self.stride + self.k - 2 * self.pad,
                (w - 1) * self.stride + self.k - 2 * self.pad)

    def forward(self, x: np.ndarray):
        n, _, h, w = x.shape
        oh, ow = self.out_size(h, w)
        cols = np.matmul(self.w.reshape(self.in_ch, -1).T, x.reshape(n, self.in_ch, -1))
        y = col2im(cols, (n, self.out_ch, oh, ow), self.k, self.stride, self.pad)
        y += self.b[None, :, None, None]
        return y, (x, (n, self.out_ch, oh, ow))

    def backward(self, dy: np.ndarray, cache):
        x, _y_shape = cache
        n = x.shape[0]
        dcols = im2col(dy, self.k, self.stride, self.pad)
        xf = x.reshape(n, self.in_ch, -1)
        self.gw += np.einsum("nif,nkf->ik", xf, dcols).reshape(self.w.shape)
        self.gb += dy.sum(axis=(0, 2, 3))
        dx = np.matmul(self.w.reshape(self.in_ch, -1), dcols)
        return dx.reshape(x.shape)


class InstanceNorm:
    """Per-sample, per-channel normalisation over the spatial axes (no affine)."""

    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def forward(self, x: np.ndarray):
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        return xhat, (xhat, inv)

    def backward(self, dy: np.ndarray, cache):
        xhat, inv = cache
        dmean = dy.mean(axis=(2, 3), keepdims=True)
        dproj = (dy * xhat).mean(axis=(2, 3), keepdims=True)
        return inv * (dy - dmean - xhat * dproj)


class LeakyReLU:
    def __init__(self, slope: float = 0.2):
        self.slope = slope

    def forward(self, x: np.ndarray):
        pos = x >= 0
        return np.where(pos, x, self.slope * x), pos

    def backward(self, dy: np.ndarray, pos):
        return np.where(pos, dy, self.slope * dy)


class Tanh:
    def forward(self, x: np.ndarray):
        y = np.tanh(x)
        return y, y

    def backward(self, dy: np.ndarray, y):
        return dy * (1.0 - y * y)


def bce_with_logits(z: np.ndarray, target: float) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on logits against a constant label.

    Uses the overflow-safe form max(z,0) - z*t + log(1 + exp(-|z|)).
    Returns (loss, dloss/dz).
    """
    loss = np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))
    grad = (1.0 / (1.0 + np.exp(-z)) - target) / z.size
    return float(loss.mean()), grad


def l1_mean(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute difference and its gradient with respect to ``a``."""
    diff = a - b
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size
