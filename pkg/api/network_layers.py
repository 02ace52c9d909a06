# network_layers.py - functional layers with analytic gradients on (batch, channels, height, width) arrays

from typing import Callable, Dict, Optional, Tuple

import numpy as np

from api.errors import CheckpointError, ShapeError
from api.models import BatchNormLayer, Tensor4

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_tensor4(x: np.ndarray, name: str):
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty (batch, channels, height, width) array, got {x.shape}")


def _im2col(x: Tensor4, k: int) -> np.ndarray:
    """(B, C*k*k, H*W) patch matrix of x under zero 'same' padding, rows ordered (c, dy, dx)"""
    b, c, h, w = x.shape
    pad = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, h, w), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = padded[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(b, c * k * k, h * w)


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], k: int) -> Tensor4:
    """Adjoint of _im2col: scatter-add every patch entry back onto its pixel"""
    b, c, h, w = shape
    pad = k // 2
    cols = cols.reshape(b, c, k, k, h, w)
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            padded[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    return padded[:, :, pad:pad + h, pad:pad + w]


def conv2d_forward(x: Tensor4, w: np.ndarray, b: np.ndarray) -> Tensor4:
    """Cross-correlation with zero 'same' padding; w is (out, in, k, k)"""
    _check_tensor4(x, "x")
    out_ch, in_ch, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got {kh}x{kw}")
    if in_ch != x.shape[1]:
        raise ShapeError(f"kernel expects {in_ch} input channels, got {x.shape[1]}")
    if b.shape != (out_ch,):
        raise ShapeError(f"bias must have shape ({out_ch},), got {b.shape}")

    batch, _, h, width = x.shape
    y = np.matmul(w.reshape(out_ch, -1), _im2col(x, kh))   # (B, O, H*W)
    return y.reshape(batch, out_ch, h, width) + b[None, :, None, None]


def conv2d_backward(dout: Tensor4, x: Tensor4, w: np.ndarray) -> Tuple[Tensor4, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of conv2d_forward"""
    if dout.shape[0] != x.shape[0] or dout.shape[1] != w.shape[0] or dout.shape[2:] != x.shape[2:]:
        raise ShapeError(f"upstream gradient {dout.shape} does not match input {x.shape} / kernel {w.shape}")
    out_ch, k = w.shape[0], w.shape[2]
    dout_flat = dout.reshape(dout.shape[0], out_ch, -1)

    dw = np.matmul(dout_flat, _im2col(x, k).transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dx = _col2im(np.matmul(w.reshape(out_ch, -1).T, dout_flat), x.shape, k)
    return dx, dw, db


def batchnorm_forward(x: Tensor4, gamma: np.ndarray, beta: np.ndarray, mode: str = "train",
                      state: Optional[BatchNormLayer] = None, momentum: float = BN_MOMENTUM) -> Tuple[Tensor4, Dict]:
    """
    Per-channel batch normalisation.

    Training mode normalises with batch statistics and, when a state is given, folds them
    into its running mean/variance with `momentum` (default 0.1, unbiased variance);
    momentum 1 replaces them outright. Inference mode uses the running statistics and
    requires that at least one training step happened.
    """
    _check_tensor4(x, "x")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"gamma/beta must have shape ({channels},)")

    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if state is not None:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * n / max(n - 1, 1)
            state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mean
            state.running_var[...] = (1 - momentum) * state.running_var + momentum * unbiased
            state.initialized = True
    elif mode == "inference":
        if state is None or not state.initialized:
            raise CheckpointError("batch-norm running statistics are uninitialised; train before inference")
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown batch-norm mode: {mode}")

    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
    cache = {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma, "mode": mode}
    return y.astype(x.dtype, copy=False), cache


def batchnorm_backward(dout: Tensor4, cache: Dict) -> Tuple[Tensor4, np.ndarray, np.ndarray]:
    """Gradients (dx, dgamma, dbeta) of batchnorm_forward"""
    x_hat, inv_std, gamma = cache["x_hat"], cache["inv_std"], cache["gamma"]
    if dout.shape != x_hat.shape:
        raise ShapeError(f"upstream gradient {dout.shape} does not match activations {x_hat.shape}")

    dgamma = (dout * x_hat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dx_hat = dout * gamma[None, :, None, None]
    scale = inv_std[None, :, None, None]

    if cache["mode"] == "inference":
        return dx_hat * scale, dgamma, dbeta

    n = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3]
    mean_dx_hat = dx_hat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dx_hat_x_hat = (dx_hat * x_hat).mean(axis=(0, 2, 3), keepdims=True)
    dx = scale * (dx_hat - mean_dx_hat - x_hat * mean_dx_hat_x_hat)
    return dx, dgamma, dbeta


def relu_forward(x: Tensor4) -> Tensor4:
    return np.maximum(x, 0)


def relu_backward(dout: Tensor4, x: Tensor4) -> Tensor4:
    return np.where(x > 0, dout, 0)


def mse_loss(pred: Tensor4, target: Tensor4) -> Tuple[float, Tensor4]:
    """(1 / N) sum_i |pred_i - target_i|_F^2 over a batch of N, with its gradient"""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    n = pred.shape[0]
    diff = pred - target
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def gradient_check(fn: Callable[[], float], x: np.ndarray, analytic: np.ndarray, step: float = 1e-6,
                   scale: Optional[float] = None) -> float:
    """
    Norm-wise relative error between `analytic` and central differences of fn w.r.t. x.

    fn is re-evaluated after each in-place perturbation of x; x is restored afterwards.
    `scale` replaces the default normaliser max(|numeric|, |analytic|), e.g. with the norm of
    a whole-model gradient when x is one parameter array among many.
    """
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic gradient {analytic.shape} does not match {x.shape}")
    if not x.flags.c_contiguous:
        raise ShapeError("gradient_check perturbs x in place and needs a C-contiguous array")
    numeric = np.zeros_like(x, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_numeric = numeric.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + step
        plus = fn()
        flat_x[i] = original - step
        minus = fn()
        flat_x[i] = original
        flat_numeric[i] = (plus - minus) / (2 * step)

    if scale is None:
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic))
    scale = max(scale, np.finfo(float).tiny)
    return float(np.linalg.norm(numeric - analytic) / scale)
