"""Forward/backward primitives for the toy denoiser (numpy, float64).

Feature maps use the layout ``(frames, sites, channels)`` where
``sites = H * W`` in row-major order.  Each ``*_backward`` takes the cache
returned by the matching forward and the upstream gradient.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LN_EPS = 1e-5


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """``(n, c, H, W)`` -> ``(n, H*W, c*9)`` zero-padded 3x3 patches, (c, ky, kx) order."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, H, W, 3, 3
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, h * w, c * 9)


def col2im3x3(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`im2col3x3`."""
    n = cols.shape[0]
    blocks = cols.reshape(n, h, w, c, 3, 3)
    out = np.zeros((n, c, h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            out[:, :, ky:ky + h, kx:kx + w] += blocks[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return out[:, :, 1:-1, 1:-1]


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Per-frame 3x3 convolution. ``x``: ``(n, c_in, H, W)``; returns ``(n, H*W, c_out)``."""
    cols = im2col3x3(x)
    return cols @ weight + bias, cols


def conv3x3_backward_input(dy: np.ndarray, weight: np.ndarray, c_in: int, h: int, w: int) -> np.ndarray:
    return col2im3x3(dy @ weight.T, c_in, h, w)


def sites_to_image(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """``(n, H*W, c)`` -> ``(n, c, H, W)``."""
    n, _, c = x.shape
    return x.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def image_to_sites(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n, h * w, c)


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def silu_backward(dy, x, s):
    return dy * s * (1.0 + x * (1.0 - s))


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + shift, (xhat, inv)


def layer_norm_backward(dy, gain, cache):
    """Returns ``(dx, dgain, dshift)``; parameter grads are summed over all leading axes."""
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dshift = dy.sum(axis=axes)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dshift


def softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, probs: np.ndarray | None = None):
    """Scaled dot-product attention over the last two axes.

    If ``probs`` is given it replaces the softmax output (attention-map
    injection); the scores are still returned for inspection.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    p = softmax(scores)
    used = p if probs is None else probs
    return used @ v, p, used


def attention_backward(dout, q, k, v, p):
    """Gradients ``(dq, dk, dv)`` for un-injected attention with probabilities ``p``.

    ``k``/``v`` may carry fewer leading axes than ``q`` (shared keys); their
    gradients are reduced back to the original shape.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    dp = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(p, -1, -2) @ dout
    ds = softmax_backward(dp, p) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, _reduce_to(dk, k.shape), _reduce_to(dv, v.shape)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])
