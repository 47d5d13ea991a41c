"""Small numpy neural-network engine: the layers the capsule network needs.

Every layer is a pair of plain functions, a forward that returns the output
plus whatever the reverse pass needs, and a backward that takes the upstream
gradient and returns a :class:`LayerGrad`.  Tensors are ``numpy.ndarray``;
the dtype of the input decides the working precision.

Layouts
-------
* sequences are ``(batch, channels, length)``
* conv kernels are ``(out_channels, in_channels, kernel)``
* dense weights are ``(out_features, in_features)``
* flattening a ``(channels, length)`` map is channel-major, i.e. feature
  index ``c * length + t``
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with a layer."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where it must not."""


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")
    return arr


def output_length(length: int, window: int, stride: int) -> int:
    """Length of a valid (unpadded) sliding window pass; < 1 means no output."""
    if window < 1 or stride < 1:
        raise ShapeError(f"window and stride must be positive, got {window}, {stride}")
    if length < window:
        return 0
    return (length - window) // stride + 1


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-D or {ndim}-D input, got shape {x.shape}")
    return x, False


# -- convolution -------------------------------------------------------------

def _im2col(x: np.ndarray, kernel: int, stride: int, l_out: int) -> np.ndarray:
    b, c, _ = x.shape
    win = sliding_window_view(x, kernel, axis=2)[:, :, : (l_out - 1) * stride + 1 : stride]
    # (B, C, L_out, K) -> (B * L_out, C * K)
    return win.transpose(0, 2, 1, 3).reshape(b * l_out, c * kernel)


def conv1d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid 1-D cross-correlation.

    ``out[c, t] = bias[c] + sum_{i,k} x[i, t*stride + k] * kernel[c, i, k]``

    Accepts ``(C_in, L)`` or ``(B, C_in, L)``; trailing samples that do not fill
    a whole stride are dropped.
    """
    xb, squeeze = _as_batch(x, 3)
    c_out, c_in, k = kernel.shape
    if xb.shape[1] != c_in:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {xb.shape[1]}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    l_out = output_length(xb.shape[2], k, stride)
    if l_out < 1:
        raise ShapeError(f"input length {xb.shape[2]} shorter than kernel {k}")
    cols = _im2col(xb, k, stride, l_out)
    out = cols @ kernel.reshape(c_out, c_in * k).T
    out += bias
    out = np.ascontiguousarray(out.reshape(xb.shape[0], l_out, c_out).transpose(0, 2, 1))
    return out[0] if squeeze else out


def conv1d_backward(dout: np.ndarray, x: np.ndarray, kernel: np.ndarray, stride: int = 1) -> LayerGrad:
    """Reverse pass of :func:`conv1d`; columns are rebuilt from ``x`` rather than cached."""
    xb, squeeze = _as_batch(x, 3)
    db_, _ = _as_batch(dout, 3)
    c_out, c_in, k = kernel.shape
    b, _, length = xb.shape
    l_out = db_.shape[2]
    cols = _im2col(xb, k, stride, l_out)
    d2 = db_.transpose(0, 2, 1).reshape(b * l_out, c_out)
    dw = (d2.T @ cols).reshape(c_out, c_in, k)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ kernel.reshape(c_out, c_in * k)).reshape(b, l_out, c_in, k)
    dcols = np.ascontiguousarray(dcols.transpose(0, 2, 3, 1))  # (B, C_in, K, L_out)
    # polyphase scatter: tap j lands on phase j % stride, block offset j // stride
    blocks = -(-length // stride) + (k - 1) // stride + 1
    acc = np.zeros((b, c_in, stride, blocks), dtype=xb.dtype)
    for j in range(k):
        q, r = divmod(j, stride)
        acc[:, :, r, q : q + l_out] += dcols[:, :, j]
    dx = acc.transpose(0, 1, 3, 2).reshape(b, c_in, blocks * stride)[:, :, :length]
    dx = np.ascontiguousarray(dx)
    return LayerGrad(dx[0] if squeeze else dx, {"weight": dw, "bias": dbias})


# -- batch normalisation -----------------------------------------------------

@dataclass
class BatchNormStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    stats: BatchNormStats,
    train: bool,
    eps: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM,
) -> tuple[np.ndarray, BatchNormCache, BatchNormStats]:
    """Per-channel batch norm over ``(B, C, L)`` or ``(B, C)`` input.

    Train mode normalises with the batch statistics (biased variance) and
    returns running statistics blended as ``momentum * old + (1 - momentum) * new``.
    Inference mode uses ``stats`` and returns them unchanged.
    """
    if x.ndim not in (2, 3):
        raise ShapeError(f"batchnorm expects (B, C) or (B, C, L), got {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("batchnorm on an empty batch")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"gamma/beta must have shape ({x.shape[1]},)")
    axes = (0, 2) if x.ndim == 3 else (0,)
    count = x.shape[0] * (x.shape[2] if x.ndim == 3 else 1)
    if train:
        if count < 2:
            raise ShapeError("train-mode batchnorm needs at least 2 values per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_stats = BatchNormStats(
            (momentum * stats.mean + (1 - momentum) * mean).astype(stats.mean.dtype),
            (momentum * stats.var + (1 - momentum) * var).astype(stats.var.dtype),
        )
    else:
        mean, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)
        new_stats = stats
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    out = xhat * _bn_view(gamma, x.ndim) + _bn_view(beta, x.ndim)
    return out, BatchNormCache(xhat, inv_std, gamma, train), new_stats


def batchnorm_backward(dout: np.ndarray, cache: BatchNormCache) -> LayerGrad:
    nd = dout.ndim
    axes = (0, 2) if nd == 3 else (0,)
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * cache.xhat).sum(axis=axes)
    scale = _bn_view(cache.gamma * cache.inv_std, nd)
    if not cache.train:
        return LayerGrad(dout * scale, {"gamma": dgamma, "beta": dbeta})
    count = dout.size // dout.shape[1]
    dx = scale / count * (
        count * dout - _bn_view(dbeta, nd) - cache.xhat * _bn_view(dgamma, nd)
    )
    return LayerGrad(dx.astype(dout.dtype, copy=False), {"gamma": dgamma, "beta": dbeta})


# -- activations, pooling, dense ---------------------------------------------

ACTIVATIONS = ("tanh", "relu")


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0)
    raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")


def activation_backward(dout: np.ndarray, out: np.ndarray, kind: str) -> LayerGrad:
    """Gradient expressed through the forward *output* (tanh' = 1 - y^2)."""
    if kind == "tanh":
        return LayerGrad(dout * (1 - out * out))
    if kind == "relu":
        return LayerGrad(dout * (out > 0))
    raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")


def avgpool1d(x: np.ndarray, window: int, stride: int = 1) -> np.ndarray:
    xb, squeeze = _as_batch(x, 3)
    l_out = output_length(xb.shape[2], window, stride)
    if l_out < 1:
        raise ShapeError(f"pool window {window} longer than input length {xb.shape[2]}")
    win = sliding_window_view(xb, window, axis=2)[:, :, : (l_out - 1) * stride + 1 : stride]
    out = win.mean(axis=3)
    return out[0] if squeeze else out


def avgpool1d_backward(dout: np.ndarray, input_length: int, window: int, stride: int = 1) -> LayerGrad:
    db_, squeeze = _as_batch(dout, 3)
    l_out = db_.shape[2]
    dx = np.zeros(db_.shape[:2] + (input_length,), dtype=db_.dtype)
    share = db_ / window
    stop = (l_out - 1) * stride + 1
    for j in range(window):
        dx[:, :, j : j + stop : stride] += share
    return LayerGrad(dx[0] if squeeze else dx)


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``W @ x + b`` for one vector or row-wise for a ``(B, D_in)`` batch.

    Inputs with more than two axes are flattened channel-major per sample.
    """
    squeeze = x.ndim == 1
    xb = x.reshape(1, -1) if squeeze else x.reshape(x.shape[0], -1)
    if xb.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense layer expects {weight.shape[1]} inputs, got {xb.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = xb @ weight.T + bias
    return out[0] if squeeze else out


def fully_connected_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray) -> LayerGrad:
    squeeze = x.ndim == 1
    xb = x.reshape(1, -1) if squeeze else x.reshape(x.shape[0], -1)
    d2 = dout.reshape(xb.shape[0], -1)
    dx = (d2 @ weight).reshape(x.shape)
    return LayerGrad(dx, {"weight": d2.T @ xb, "bias": d2.sum(axis=0)})


def depth_concat(inputs, expected: int | None = None) -> np.ndarray:
    """Stack one scalar (or one ``(B,)`` column) per branch, in branch order."""
    inputs = list(inputs)
    if expected is not None and len(inputs) != expected:
        raise ShapeError(f"expected {expected} branch outputs, got {len(inputs)}")
    cols = [np.asarray(v).reshape(-1) for v in inputs]
    if len({c.shape for c in cols}) > 1:
        raise ShapeError("branch outputs have different batch sizes")
    out = np.stack(cols, axis=-1)
    return out[0] if np.ndim(inputs[0]) == 0 else out


def depth_concat_backward(dout: np.ndarray) -> list[np.ndarray]:
    return [dout[..., i] for i in range(dout.shape[-1])]


# -- classifier head ---------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Normalised exponentials along the last axis, max-shifted for stability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= classes):
        raise ValueError(f"labels must be integers in [0, {classes})")
    return labels


def cross_entropy(probs: np.ndarray, labels) -> np.ndarray | float:
    """``-log p[label]`` per row (scalar for a single vector), floored at 1e-12."""
    single = probs.ndim == 1
    pb = probs[None] if single else probs
    lab = _check_labels(np.atleast_1d(labels), pb.shape[-1])
    loss = -np.log(np.maximum(pb[np.arange(pb.shape[0]), lab], PROB_FLOOR))
    return float(loss[0]) if single else loss


def softmax_cross_entropy_backward(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of the *mean* cross-entropy w.r.t. the logits: ``(p - onehot) / B``."""
    single = probs.ndim == 1
    pb = probs[None] if single else probs
    lab = _check_labels(np.atleast_1d(labels), pb.shape[-1])
    g = pb.copy()
    g[np.arange(pb.shape[0]), lab] -= 1
    g /= pb.shape[0]
    return g[0] if single else g


# -- optimiser ---------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


def sgdm_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState):
    """One momentum step, in place: ``v = m*v - lr*g; p += v``.

    All gradients are checked before any parameter moves, so a rejected step
    leaves both ``params`` and ``state`` untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= state.momentum
        v -= np.asarray(state.learning_rate, dtype=p.dtype) * g
        p += v
    return params, state
