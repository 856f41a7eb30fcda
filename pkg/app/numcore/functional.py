"""Neural-network ops on Tensors: dense, dilated depthwise conv, normalizations,
activations, dropout, scale and overlap-add synthesis.

Time runs along axis -2 and channels along axis -1; any leading axes are batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from app.numcore.tensor import Tensor, TensorLike, as_tensor, mul, unbroadcast
from app.utils.helper import DimensionError

NORM_EPS = 1e-8


def receptive_field(kernel_size: int, dilation: int) -> int:
    """Frames seen by one output frame of a dilated convolution."""
    return (kernel_size - 1) * dilation + 1


# ---------- dense ----------

def dense(z: TensorLike, weight, bias=None) -> Tensor:
    """out[..., j] = sum_i z[..., i] * W[i, j] + b[j]"""
    z, W = as_tensor(z), as_tensor(weight)
    if W.ndim != 2 or z.shape[-1] != W.shape[0]:
        raise DimensionError("dense input width does not match weight rows", z.shape, W.shape)
    out = z @ W
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (W.shape[1],):
            raise DimensionError("dense bias does not match weight columns", b.shape, W.shape)
        out = out + b
    return out


# ---------- dilated depthwise convolution ----------

def depthwise_conv1d(z: TensorLike, kernel, dilation: int = 1, bias=None) -> Tensor:
    """Same-length zero-padded per-channel convolution along time.

    out[n, c] = sum_j z[n + (j - (k-1)/2) * dilation, c] * kernel[j, c]
    """
    z, K = as_tensor(z), as_tensor(kernel)
    k = K.shape[0]
    if k % 2 == 0:
        raise ValueError(f"Depthwise kernel size must be odd, got {k}")
    if dilation < 1:
        raise ValueError(f"Dilation must be >= 1, got {dilation}")
    if K.ndim != 2 or z.ndim < 2 or K.shape[1] != z.shape[-1]:
        raise DimensionError("depthwise kernel channels do not match input", z.shape, K.shape)

    n = z.shape[-2]
    pad = (k - 1) // 2 * dilation
    widths = [(0, 0)] * (z.ndim - 2) + [(pad, pad), (0, 0)]
    padded = np.pad(z.data, widths)
    out = np.zeros_like(z.data)
    for j in range(k):
        out += padded[..., j * dilation:j * dilation + n, :] * K.data[j]

    def backward(g):
        gz = gk = None
        if z.requires_grad:
            gpad = np.zeros_like(padded)
            for j in range(k):
                gpad[..., j * dilation:j * dilation + n, :] += g * K.data[j]
            gz = gpad[..., pad:pad + n, :]
        if K.requires_grad:
            flat_g = g.reshape(-1, g.shape[-1])
            gk = np.stack([
                (padded[..., j * dilation:j * dilation + n, :].reshape(-1, g.shape[-1]) * flat_g).sum(axis=0)
                for j in range(k)
            ])
        return gz, gk

    result = Tensor.from_op(out, (z, K), backward, "depthwise_conv1d")
    if bias is not None:
        result = result + as_tensor(bias)
    return result


# ---------- normalizations ----------

def _normalize(z: Tensor, axes: Tuple[int, ...], gamma, beta, eps: float,
               stats: Optional[Tuple[np.ndarray, np.ndarray]] = None, op: str = "norm") -> Tensor:
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (z.shape[-1],) or beta.shape != (z.shape[-1],):
        raise DimensionError(f"{op} affine parameters do not match channels", z.shape, gamma.shape)
    if stats is None:
        mu = z.data.mean(axis=axes, keepdims=True)
        centered = z.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
    else:
        mu, var = stats
        centered = z.data - mu
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    reduce_axes = tuple(range(z.ndim - 1))

    def backward(g):
        gxhat = g * gamma.data
        if stats is None:
            gz = inv_std * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gz = gxhat * inv_std
        return gz, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return Tensor.from_op(out, (z, gamma, beta), backward, op)


def instance_norm(z: TensorLike, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    """Normalize each channel over time (axis -2), then affine."""
    z = as_tensor(z)
    if z.ndim < 2 or z.shape[-2] < 1:
        raise DimensionError("instance_norm needs at least one frame", z.shape, None)
    return _normalize(z, (z.ndim - 2,), gamma, beta, eps, op="instance_norm")


def layer_norm(z: TensorLike, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    """Normalize each frame over channels (axis -1), then affine."""
    z = as_tensor(z)
    return _normalize(z, (z.ndim - 1,), gamma, beta, eps, op="layer_norm")


@dataclass
class RunningStats:
    """Batch-norm running statistics; None until the first training update."""
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    momentum: float = 0.99

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        if not self.initialized:
            self.mean, self.var = batch_mean.copy(), batch_var.copy()
            return
        self.mean = self.momentum * self.mean + (1.0 - self.momentum) * batch_mean
        self.var = self.momentum * self.var + (1.0 - self.momentum) * batch_var


def batch_norm(z: TensorLike, gamma, beta, running: RunningStats, training: bool,
               eps: float = NORM_EPS) -> Tensor:
    """Statistics over every axis except channels (B x N pooled)."""
    z = as_tensor(z)
    axes = tuple(range(z.ndim - 1))
    if training:
        mu = z.data.mean(axis=axes)
        var = z.data.var(axis=axes)
        running.update(mu, var)
        return _normalize(z, axes, gamma, beta, eps, op="batch_norm")
    if not running.initialized:
        raise ValueError("batch_norm: uninitialized running stats (run a training update first)")
    return _normalize(z, axes, gamma, beta, eps, stats=(running.mean, running.var), op="batch_norm")


# ---------- activations ----------

def sigmoid(z: TensorLike) -> Tensor:
    z = as_tensor(z)
    s = expit(z.data)
    return Tensor.from_op(s, (z,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(z: TensorLike) -> Tensor:
    z = as_tensor(z)
    mask = z.data > 0
    return Tensor.from_op(np.where(mask, z.data, 0.0).astype(z.dtype), (z,), lambda g: (g * mask,), "relu")


def prelu(z: TensorLike, slope) -> Tensor:
    """x if x >= 0 else a * x, with one slope per channel."""
    z, a = as_tensor(z), as_tensor(slope)
    positive = z.data >= 0
    out = np.where(positive, z.data, a.data * z.data)

    def backward(g):
        gz = np.where(positive, g, a.data * g)
        ga = unbroadcast(np.where(positive, 0.0, g * z.data), a.shape) if a.requires_grad else None
        return gz, ga

    return Tensor.from_op(out, (z, a), backward, "prelu")


def swish(z: TensorLike) -> Tensor:
    z = as_tensor(z)
    s = expit(z.data)
    return Tensor.from_op(z.data * s, (z,), lambda g: (g * (s + z.data * s * (1.0 - s)),), "swish")


def glu(z: TensorLike) -> Tensor:
    """Split channels into [value | gate]; value * sigmoid(gate)."""
    z = as_tensor(z)
    width = z.shape[-1]
    if width % 2:
        raise DimensionError("glu needs an even channel count", z.shape, None)
    half = width // 2
    value, gate = z.data[..., :half], z.data[..., half:]
    s = expit(gate)

    def backward(g):
        return (np.concatenate([g * s, g * value * s * (1.0 - s)], axis=-1),)

    return Tensor.from_op(value * s, (z,), backward, "glu")


def softmax(z: TensorLike, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (z,), backward, "softmax")


def scale(z: TensorLike, gamma) -> Tensor:
    """out = gamma * z with a single trainable scalar."""
    z, gm = as_tensor(z), as_tensor(gamma)
    if gm.size != 1:
        raise DimensionError("scale parameter must be a scalar", gm.shape, ())
    factor = gm.data.reshape(())

    def backward(g):
        gg = np.asarray((g * z.data).sum()).reshape(gm.shape) if gm.requires_grad else None
        return g * factor, gg

    return Tensor.from_op(z.data * factor, (z, gm), backward, "scale")


def dropout(z: TensorLike, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
    z = as_tensor(z)
    if not training or rate == 0.0:
        return z
    if rng is None:
        raise ValueError("Training-mode dropout needs an rng")
    keep = (rng.random(z.shape) >= rate).astype(z.dtype) / (1.0 - rate)
    return mul(z, Tensor(keep))


# ---------- synthesis ----------

def overlap_add(frames: TensorLike, hop: int) -> Tensor:
    """Sum frames (..., N, W) with stride `hop` into (..., (N-1)*hop + W)."""
    frames = as_tensor(frames)
    n, width = frames.shape[-2], frames.shape[-1]
    chunks = -(-width // hop)
    lead = frames.shape[:-2]
    total = (n - 1) * hop + width

    padded = np.zeros(lead + (n, chunks * hop), dtype=frames.dtype)
    padded[..., :width] = frames.data
    parts = padded.reshape(lead + (n, chunks, hop))
    acc = np.zeros(lead + (n + chunks - 1, hop), dtype=frames.dtype)
    for j in range(chunks):
        acc[..., j:j + n, :] += parts[..., :, j, :]
    out = acc.reshape(lead + ((n + chunks - 1) * hop,))[..., :total]

    def backward(g):
        gfull = np.zeros(lead + ((n + chunks - 1) * hop,), dtype=g.dtype)
        gfull[..., :total] = g
        gacc = gfull.reshape(lead + (n + chunks - 1, hop))
        gparts = np.stack([gacc[..., j:j + n, :] for j in range(chunks)], axis=-2)
        return (gparts.reshape(lead + (n, chunks * hop))[..., :width],)

    return Tensor.from_op(out, (frames,), backward, "overlap_add")
