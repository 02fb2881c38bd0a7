"""Rank-4 tensor primitives with hand-written forward and backward passes.

Tensors are plain numpy arrays in (N, C, H, W) layout. Storage is float32
throughout the model; every primitive also accepts float64 and preserves the
input dtype, which the gradient checks rely on. Convolutions compute in the
input dtype; batch-norm statistics always accumulate in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


def _check4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")


def _out_dtype(x: np.ndarray):
    return x.dtype if x.dtype in (np.float32, np.float64) else np.float32


# ---------------------------------------------------------------- convolution


@dataclass
class ConvParams:
    kernel: np.ndarray
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be (C_out, C_in, kH, kW), got {self.kernel.shape}")
        kh, kw = self.kernel.shape[2:]
        if kh != kw:
            raise ShapeError(f"kernel must be square, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding is None:
            self.padding = kh // 2


def _conv_geometry(x: np.ndarray, p: ConvParams):
    _check4(x)
    c_out, c_in, k, _ = p.kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(
            f"input channels {x.shape[1]} do not match kernel C_in {c_in} "
            f"(input shape {x.shape}, kernel shape {p.kernel.shape})"
        )
    n, _, h, w = x.shape
    ho = (h + 2 * p.padding - k) // p.stride + 1
    wo = (w + 2 * p.padding - k) // p.stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"input {x.shape} too small for kernel {p.kernel.shape}")
    return n, c_out, ho, wo, k


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    dt = _out_dtype(x)
    if pad == 0:
        return np.ascontiguousarray(x, dtype=dt)
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dt)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


# Stride-1 valid correlation computed on the flattened image: the window at
# tap (i, j) is the contiguous run starting at i*W + j. Output rows come out
# W wide; the trailing (kW - 1) columns of each row are junk and get cropped.


def _valid_corr(x: np.ndarray, w: np.ndarray, ho: int, wo: int) -> np.ndarray:
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    span = (ho - 1) * wd + wo
    flat = x.reshape(n, c, h * wd)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    acc = np.zeros((n, co, ho * wd), x.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wd + j
            acc[:, :, :span] += np.matmul(taps[i, j], flat[:, :, off : off + span])
    return acc.reshape(n, co, ho, wd)[:, :, :, :wo]


def _valid_corr_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    span = (ho - 1) * wd + wo
    flat = x.reshape(n, c, h * wd)
    gfull = np.zeros((n, co, ho, wd), x.dtype)
    gfull[:, :, :, :wo] = g
    gflat = gfull.reshape(n, co, ho * wd)[:, :, :span]
    gx = np.zeros((n, c, h * wd), x.dtype)
    gw = np.zeros(w.shape, x.dtype)
    taps_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for i in range(kh):
        for j in range(kw):
            off = i * wd + j
            win = flat[:, :, off : off + span]
            gw[:, :, i, j] = np.matmul(gflat, win.transpose(0, 2, 1)).sum(axis=0)
            gx[:, :, off : off + span] += np.matmul(taps_t[i, j], gflat)
    return gx.reshape(n, c, h, wd), gw


def _phases(xp: np.ndarray, kernel: np.ndarray, stride: int):
    """Split a strided correlation into stride-1 correlations over input phases."""
    if stride == 1:
        yield (0, 0), xp, kernel
        return
    k = kernel.shape[2]
    for a in range(min(stride, k)):
        for b in range(min(stride, k)):
            yield (a, b), np.ascontiguousarray(xp[:, :, a::stride, b::stride]), kernel[:, :, a::stride, b::stride]


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Zero-padded cross-correlation, no bias."""
    n, c_out, ho, wo, _ = _conv_geometry(x, params)
    xp = _pad(x, params.padding)
    wk = params.kernel.astype(xp.dtype, copy=False)
    out = np.zeros((n, c_out, ho, wo), xp.dtype)
    for _, xs, ws in _phases(xp, wk, params.stride):
        out += _valid_corr(xs, ws, ho, wo)
    return out


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Return (grad_input, grad_kernel) for a conv2d_forward call."""
    n, c_out, ho, wo, _ = _conv_geometry(x, params)
    if grad_out.shape != (n, c_out, ho, wo):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output {(n, c_out, ho, wo)}"
        )
    s, pad = params.stride, params.padding
    xp = _pad(x, pad)
    wk = params.kernel.astype(xp.dtype, copy=False)
    g = grad_out.astype(xp.dtype, copy=False)
    gk = np.zeros(wk.shape, xp.dtype)
    gxp = np.zeros(xp.shape, xp.dtype)
    for (a, b), xs, ws in _phases(xp, wk, s):
        gxs, gws = _valid_corr_backward(xs, ws, g)
        gxp[:, :, a::s, b::s] += gxs
        gk[:, :, a::s, b::s] = gws
    h, w = x.shape[2:]
    gx = gxp[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(gx, dtype=_out_dtype(x)), gk.astype(_out_dtype(params.kernel))


# ---------------------------------------------------------- batch normalization


@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    training: bool = True

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BNState":
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), **kw,
        )


def _check_bn(x: np.ndarray, state: BNState) -> None:
    _check4(x)
    c = x.shape[1]
    for name in ("gamma", "beta", "running_mean", "running_var"):
        v = getattr(state, name)
        if v.shape != (c,):
            raise ShapeError(f"BN {name} has shape {v.shape}, input has {c} channels ({x.shape})")


def _batch_stats(x: np.ndarray):
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise ValueError(
            f"batch norm in training mode needs N*H*W >= 2 per channel, got shape {x.shape}"
        )
    dt = _out_dtype(x)
    mean = x.sum(axis=(0, 2, 3), dtype=np.float64) / count
    centered = x - mean.astype(dt)[None, :, None, None]
    var = np.einsum("nchw,nchw->c", centered, centered, dtype=np.float64) / count
    return centered, mean, var, count


def _chan(v: np.ndarray, dt) -> np.ndarray:
    return v.astype(dt)[None, :, None, None]


def batchnorm_forward(x: np.ndarray, state: BNState) -> np.ndarray:
    """Normalize per channel. Training mode updates the running statistics in place."""
    _check_bn(x, state)
    dt = _out_dtype(x)
    gamma = state.gamma.astype(np.float64)
    if not state.training:
        scale = gamma / np.sqrt(state.running_var.astype(np.float64) + state.eps)
        return (x - _chan(state.running_mean, dt)) * _chan(scale, dt) + _chan(state.beta, dt)

    centered, mean, var, count = _batch_stats(x)
    scale = gamma / np.sqrt(var + state.eps)
    out = centered * _chan(scale, dt) + _chan(state.beta, dt)

    m = state.momentum
    unbiased = var * count / (count - 1)
    state.running_mean[...] = m * state.running_mean + (1 - m) * mean
    state.running_var[...] = m * state.running_var + (1 - m) * unbiased
    return out


def batchnorm_backward(x: np.ndarray, state: BNState, grad_out: np.ndarray):
    """Gradients of the training-mode normalization, including the batch-statistics terms."""
    if not state.training:
        raise ValueError("batchnorm_backward is only defined for training mode")
    _check_bn(x, state)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    dt = _out_dtype(x)
    centered, _, var, count = _batch_stats(x)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    g = grad_out.astype(dt, copy=False)

    grad_beta = g.sum(axis=(0, 2, 3), dtype=np.float64)
    grad_gamma = np.einsum("nchw,nchw->c", g, centered, dtype=np.float64) * inv_std
    gamma = state.gamma.astype(np.float64)
    # gx = gamma*inv_std/count * (count*g - sum(g) - xhat*sum(g*xhat))
    a = gamma * inv_std
    b = a * grad_beta / count
    c = a * grad_gamma * inv_std / count
    gx = g * _chan(a, dt) - _chan(b, dt) - centered * _chan(c, dt)
    pdt = _out_dtype(state.gamma)
    return gx, grad_gamma.astype(pdt), grad_beta.astype(pdt)


# ------------------------------------------------------------- elementwise ops


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(_out_dtype(x), copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(_out_dtype(grad_out), copy=False)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    x64 = x.astype(np.float64)
    out = np.empty_like(x64)
    pos = x64 >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x64[pos]))
    e = np.exp(x64[~pos])
    out[~pos] = e / (1.0 + e)
    return out.astype(_out_dtype(x))


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return (grad_out * y * (1 - y)).astype(_out_dtype(grad_out), copy=False)


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    _check4(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    _check4(grad_out, "grad_out")
    n, c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise ShapeError(f"grad_out spatial size must be even, got {grad_out.shape}")
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check4(a, "a")
    _check4(b, "b")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"cannot concat channels of {a.shape} and {b.shape}: N/H/W differ")
    return np.concatenate([a, b], axis=1)


def concat_backward(grad_out: np.ndarray, channels_a: int):
    return grad_out[:, :channels_a], grad_out[:, channels_a:]


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return a + b
