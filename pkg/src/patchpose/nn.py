"""Small numpy building blocks for the forward passes (no autograd)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def relu(x):
    return np.maximum(x, 0.0)


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation.

    x: (B, Cin, H, W); weight: (Cout, Cin, k, k). Zero padding.
    """
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k = weight.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", win, weight, optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def upsample_bilinear2x(x):
    """Bilinear x2 upsampling of (..., H, W) with half-pixel centres and edge clamping."""
    H, W = x.shape[-2:]

    def coords(n):
        src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
        src = np.clip(src, 0, n - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, src - lo

    ylo, yhi, wy = coords(H)
    xlo, xhi, wx = coords(W)
    top = x[..., ylo, :] * (1 - wy)[:, None] + x[..., yhi, :] * wy[:, None]
    return top[..., xlo] * (1 - wx) + top[..., xhi] * wx


def avg_pool(x, k):
    """Average pool the last two axes by an integer factor ``k``."""
    H, W = x.shape[-2:]
    return x.reshape(*x.shape[:-2], H // k, k, W // k, k).mean(axis=(-3, -1))
