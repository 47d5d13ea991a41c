"""Independent reference implementations used only by the tests.

Nothing here imports the package's numerics: loops instead of im2col,
central differences instead of reverse passes, scipy's Welch estimate
instead of the package's SNR meter.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from scipy import signal as sps_signal


def naive_conv1d(x, kernel, bias, stride):
    """Direct triple loop over (out channel, position, in channel * tap)."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    c_out, c_in, k = kernel.shape
    length = x.shape[-1]
    l_out = (length - k) // stride + 1
    out = np.zeros((c_out, l_out))
    for c in range(c_out):
        for t in range(l_out):
            acc = float(bias[c])
            for i in range(c_in):
                for j in range(k):
                    acc += x[i, t * stride + j] * kernel[c, i, j]
            out[c, t] = acc
    return out


def window_positions(length, window, stride):
    """Count window placements by walking them, not by formula."""
    n, start = 0, 0
    while start + window <= length:
        n += 1
        start += stride
    return n


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` w.r.t. every element of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_error(analytic, numeric, floor=1e-8):
    """Max abs difference scaled by the larger of the two gradient magnitudes.

    The floor keeps exactly-zero gradients (e.g. a bias feeding a
    train-mode batch norm) from turning rounding noise into a large ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)


def exact_softmax(logits):
    """Softmax in 60-digit decimal arithmetic."""
    import decimal

    ctx = decimal.Context(prec=60)
    ex = [ctx.exp(decimal.Decimal(repr(float(v)))) for v in logits]
    total = sum(ex, decimal.Decimal(0))
    return np.array([float(ctx.divide(e, total)) for e in ex])


def sgdm_trace(w0, lr, momentum, steps, grad):
    """Hand iteration of v <- m v - lr g(w); w <- w + v, in exact rationals."""
    w, v = Fraction(w0), Fraction(0)
    lr, momentum = Fraction(lr), Fraction(momentum)
    out = []
    for _ in range(steps):
        v = momentum * v - lr * grad(w)
        w = w + v
        out.append(float(w))
    return out


def welch_inband_snr_db(samples, sps, rolloff, scheme_is_msk=False, nfft=512):
    """In-band SNR from a two-sided Welch PSD.

    The noise density is the mean PSD level outside the occupied band
    (with a small guard); the signal power is the in-band excess over it.
    Returns ``nan`` when the band leaves too few noise-only bins.
    """
    half = (1.5 if scheme_is_msk else 1 + rolloff) / (2 * sps)
    f, p = sps_signal.welch(samples, nperseg=nfft, return_onesided=False, detrend=False, scaling="density")
    inside = np.abs(f) <= half
    outside = np.abs(f) >= half + 0.02
    if outside.sum() < 16:
        return math.nan
    n0 = float(np.mean(p[outside]))
    df = 1.0 / nfft
    band = 2 * half
    total_in = float(np.sum(p[inside]) * df)
    sig = total_in - n0 * band
    return 10 * math.log10(sig / (n0 * band)) if sig > 0 else -math.inf
