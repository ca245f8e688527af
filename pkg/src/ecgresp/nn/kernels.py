"""Differentiable 1D kernels: forward passes and analytic gradients.

All functions operate on (batch, channels, length) float arrays and are pure;
backward functions take whatever the forward cached plus the upstream
gradient.  Convolutions use 'same' zero padding and odd kernels so lengths
are preserved.  The heavy lifting is tap loops over the kernel dimension so
every inner step is a large vectorized array op.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def gelu(x: np.ndarray, return_cdf: bool = False):
    """x * Phi(x) with the exact Gaussian CDF (erf form).

    ``return_cdf`` also hands back Phi(x) so the backward pass can reuse it
    (erf is by far the most expensive elementwise call on this path).
    """
    cdf = x * _INV_SQRT2
    erf(cdf, out=cdf)
    cdf += 1.0
    cdf *= 0.5
    y = x * cdf
    return (y, cdf) if return_cdf else y


def gelu_grad(x: np.ndarray, gout: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    """d gelu/dx = Phi(x) + x * phi(x)."""
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return gout * (cdf + x * pdf)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _pad_same(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    b, c, n = x.shape
    out = np.zeros((b, c, n + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + n] = x
    return out


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Dense cross-correlation, zero-padded, optionally strided.

    ``x`` is (B, Cin, L); ``weight`` is (Cout, Cin, K) with K odd.  Output
    length is ceil(L / stride); tap positions are stride-spaced input
    centers, so stride 1 preserves the length exactly.
    """
    _, cin, k = weight.shape
    if k % 2 == 0:
        raise ValueError("kernel length must be odd for symmetric padding")
    pad = (k - 1) // 2
    xp = _pad_same(x, pad)
    n = x.shape[2]
    m = -(-n // stride)
    y = np.empty((x.shape[0], weight.shape[0], m), dtype=x.dtype)
    y[:] = bias[None, :, None]
    if cin == 1:
        # broadcast taps beat batched rank-1 matmuls for a single input channel
        for t in range(k):
            sl = xp[:, :1, t : t + n : stride]
            y += weight[None, :, 0, t, None] * sl
    else:
        for t in range(k):
            # (Cout, Cin) x (B, Cin, M) -> (B, Cout, M)
            y += np.matmul(weight[:, :, t], np.ascontiguousarray(xp[:, :, t : t + n : stride]))
    return y


def conv1d_grad(
    x: np.ndarray, weight: np.ndarray, gout: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _, _, k = weight.shape
    pad = (k - 1) // 2
    n = x.shape[2]
    xp = _pad_same(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.empty_like(weight)
    for t in range(k):
        gxp[:, :, t : t + n : stride] += np.matmul(weight[:, :, t].T, gout)
        gw[:, :, t] = np.tensordot(
            gout, np.ascontiguousarray(xp[:, :, t : t + n : stride]), axes=([0, 2], [0, 2])
        )
    gx = gxp[:, :, pad : pad + n]
    gb = gout.sum(axis=(0, 2))
    return gx, gw, gb


def depthwise_conv1d(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, dilation: int = 1
) -> np.ndarray:
    """Per-channel cross-correlation; channel c of the output only sees
    channel c of the input.  ``kernel`` is (C, K) with K odd."""
    c, k = kernel.shape
    if k % 2 == 0:
        raise ValueError("kernel length must be odd for symmetric padding")
    if x.shape[1] != c:
        raise ValueError(f"kernel has {c} channels, input has {x.shape[1]}")
    pad = dilation * (k - 1) // 2
    xp = _pad_same(x, pad)
    n = x.shape[2]
    y = np.empty_like(x)
    y[:] = bias[None, :, None]
    for t in range(k):
        off = t * dilation
        y += kernel[None, :, t, None] * xp[:, :, off : off + n]
    return y


def depthwise_conv1d_grad(
    x: np.ndarray, kernel: np.ndarray, gout: np.ndarray, dilation: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c, k = kernel.shape
    pad = dilation * (k - 1) // 2
    n = x.shape[2]
    xp = _pad_same(x, pad)
    gxp = np.zeros_like(xp)
    gk = np.empty_like(kernel)
    for t in range(k):
        off = t * dilation
        gxp[:, :, off : off + n] += kernel[None, :, t, None] * gout
        gk[:, t] = np.einsum("bcl,bcl->c", xp[:, :, off : off + n], gout)
    gx = gxp[:, :, pad : pad + n]
    gb = gout.sum(axis=(0, 2))
    return gx, gk, gb


def _mix(weight: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(O, I) times (B, I, L) -> (B, O, L) as one large GEMM."""
    b, i, n = x.shape
    flat = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(i, b * n)
    return (weight @ flat).reshape(-1, b, n).transpose(1, 0, 2)


def pointwise_conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Kernel-size-1 convolution: a per-position affine map across channels."""
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"weight expects {weight.shape[1]} channels, input has {x.shape[1]}")
    return _mix(weight, x) + bias[None, :, None]


def pointwise_conv1d_grad(
    x: np.ndarray, weight: np.ndarray, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gx = _mix(weight.T, gout)
    gw = np.tensordot(gout, x, axes=([0, 2], [0, 2]))
    gb = gout.sum(axis=(0, 2))
    return gx, gw, gb


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def instance_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, tuple]:
    """Normalize each (batch, channel) row over length, then apply affine."""
    mu = x.mean(axis=2, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    return y, (xhat, inv)


def instance_norm_grad(
    cache: tuple, gamma: np.ndarray, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv = cache
    ggamma = np.einsum("bcl,bcl->c", gout, xhat)
    gbeta = gout.sum(axis=(0, 2))
    gxhat = gout * gamma[None, :, None]
    m1 = gxhat.mean(axis=2, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=2, keepdims=True)
    gx = inv * (gxhat - m1 - xhat * m2)
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def avg_pool_stride(x: np.ndarray, kernel: int = 2, stride: int = 2) -> np.ndarray:
    """Non-overlapping windowed mean; a trailing partial window is dropped."""
    if kernel != stride:
        raise ValueError("only kernel == stride pooling is supported")
    b, c, n = x.shape
    m = n // kernel
    return x[:, :, : m * kernel].reshape(b, c, m, kernel).mean(axis=3)


def avg_pool_stride_grad(x_len: int, kernel: int, gout: np.ndarray) -> np.ndarray:
    b, c, m = gout.shape
    gx = np.zeros((b, c, x_len), dtype=gout.dtype)
    gx[:, :, : m * kernel].reshape(b, c, m, kernel)[...] = (gout / kernel)[:, :, :, None]
    return gx


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(B, C, L) -> (B, C) arithmetic mean over the length axis."""
    return x.mean(axis=2)


def global_avg_pool_grad(x_len: int, gout: np.ndarray) -> np.ndarray:
    return np.broadcast_to((gout / x_len)[:, :, None], gout.shape + (x_len,)).copy()


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------


def dropout(
    x: np.ndarray, p: float, rng: np.random.Generator | None, training: bool, inplace: bool = False
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: survivors scaled by 1/(1-p); identity in eval mode.

    The returned mask already carries the 1/(1-p) scale so forward and
    backward are each a single multiply.  ``inplace`` reuses ``x`` as the
    output buffer (training hot path; the caller must own ``x``).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an RNG")
    draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
    u = rng.random(x.shape, dtype=draw_dtype)
    scale = x.dtype.type(1.0 / (1.0 - p))
    mask = np.where(u >= p, scale, x.dtype.type(0))
    if inplace:
        x *= mask
        return x, mask
    return x * mask, mask


def dropout_grad(mask: np.ndarray | None, p: float, gout: np.ndarray) -> np.ndarray:
    if mask is None:
        return gout
    return gout * mask


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. the predictions."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty batch")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / pred.size) * diff
    return loss, grad.astype(pred.dtype)
