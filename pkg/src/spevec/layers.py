"""Generic differentiable layers over NHWC float64 arrays."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import Module, ShapeError


def same_out(size: int, stride: int) -> int:
    return -(-size // stride)


def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """(B*Ho*Wo, k*k*C) patch matrix for a same-padded k x k window at stride s."""
    B, H, W, C = x.shape
    Ho, Wo = same_out(H, s), same_out(W, s)
    if k == 1:
        return x[:, ::s, ::s].reshape(-1, C)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :Ho, :Wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, k * k * C)


class Conv2d(Module):
    """k x k convolution with same padding; output extent is ceil(in / stride).

    Weights are stored as (k, k, in_ch, out_ch). The im2col matrix is kept for
    the backward pass. Set ``input_grad = False`` on a first layer to skip the
    unused input gradient.
    """

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 rng: np.random.Generator | None = None, bias: bool = False):
        super().__init__()
        if k % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")
        rng = rng or np.random.default_rng(0)
        self.k, self.stride = k, stride
        self.input_grad = True
        self.in_ch, self.out_ch = in_ch, out_ch
        fan_in = k * k * in_ch
        self.add_param("weight", rng.standard_normal((k, k, in_ch, out_ch)) * np.sqrt(2.0 / fan_in))
        if bias:
            self.add_param("bias", np.zeros(out_ch))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[-1] != self.in_ch:
            raise ShapeError(f"conv expects (B, H, W, {self.in_ch}), got {x.shape}")
        k, s = self.k, self.stride
        B, H, W, C = x.shape
        Ho, Wo = same_out(H, s), same_out(W, s)
        cols = _im2col(x, k, s)
        out = cols @ self.params["weight"].reshape(-1, self.out_ch)
        if "bias" in self.params:
            out += self.params["bias"]
        self._cache = (cols, x.shape)
        return out.reshape(B, Ho, Wo, self.out_ch)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, (B, H, W, C) = self._cache
        k, s = self.k, self.stride
        p = k // 2
        Ho, Wo = dout.shape[1:3]
        d2 = dout.reshape(-1, self.out_ch)
        w = self.params["weight"]
        self.grads["weight"] += (cols.T @ d2).reshape(w.shape)
        if "bias" in self.params:
            self.grads["bias"] += d2.sum(0)
        if not self.input_grad:
            return None
        if s == 1:
            # transposed conv == conv of dout with spatially flipped, transposed kernel
            wf = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, C)
            return (_im2col(dout, k, 1) @ wf).reshape(B, H, W, C)
        dcols = d2 @ w.reshape(-1, self.out_ch).T
        if k == 1:
            dx = np.zeros((B, H, W, C))
            dx[:, ::s, ::s] = dcols.reshape(B, Ho, Wo, C)
            return dx
        dcols = dcols.reshape(B, Ho, Wo, k, k, C)
        dxp = np.zeros((B, H + 2 * p, W + 2 * p, C))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, :, :, i, j]
        return dxp[:, p:p + H, p:p + W]


class BatchNorm2d(Module):
    """Per-channel batch normalization over (B, H, W) with running statistics."""

    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.add_param("gamma", np.ones(ch))
        self.add_param("beta", np.zeros(ch))
        self.buffers["running_mean"] = np.zeros(ch)
        self.buffers["running_var"] = np.ones(ch)
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.training:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            n = x.size // x.shape[-1]
            m = self.momentum
            self.buffers["running_mean"] *= 1 - m
            self.buffers["running_mean"] += m * mean
            self.buffers["running_var"] *= 1 - m
            self.buffers["running_var"] += m * var * n / max(n - 1, 1)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, self.training)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv, training = self._cache
        axes = (0, 1, 2)
        self.grads["gamma"] += (dout * xhat).sum(axes)
        self.grads["beta"] += dout.sum(axes)
        dxhat = dout * self.params["gamma"]
        if not training:
            return dxhat * inv
        return inv * (dxhat - dxhat.mean(axes) - xhat * (dxhat * xhat).mean(axes))


class ReLU(Module):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask


class Linear(Module):
    """Affine map over the last axis; any leading shape is allowed."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 bias: bool = True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_dim)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.add_param("weight", rng.uniform(-bound, bound, (in_dim, out_dim)))
        if bias:
            self.add_param("bias", rng.uniform(-bound, bound, out_dim))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear expects last dim {self.in_dim}, got {x.shape}")
        self._x = x
        y = x @ self.params["weight"]
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.in_dim)
        d2 = dout.reshape(-1, self.out_dim)
        self.grads["weight"] += x2.T @ d2
        if "bias" in self.params:
            self.grads["bias"] += d2.sum(0)
        return dout @ self.params["weight"].T
