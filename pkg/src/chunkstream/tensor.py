"""Dense float64 tensor kernels.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in row-major
order.  Elementwise arithmetic, concatenation, slicing, reshaping and
transposition are numpy's own; this module adds the kernels whose reduction
order or layout conventions the rest of the package depends on.

Layout conventions:
    video / latent   (F, h, w, c)    or (b, F, h, w, c)
    conv2d kernel    (kh, kw, c_in, c_out)
    conv1d kernel    (t_out, t_in, k)   tokens are channels, conv runs over d
    linear weight    (d_in, d_out)
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .rng import RngStream, gaussian  # noqa: F401  re-exported


class ShapeError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@njit(cache=True)
def _bmm(a, bt, out):
    # bt is b transposed to (B, n, k) so the inner loop is contiguous
    B, m, k = a.shape
    n = bt.shape[1]
    for z in range(B):
        for i in range(m):
            for j in range(n):
                acc = a[z, i, 0] * bt[z, j, 0]
                for p in range(1, k):
                    acc += a[z, i, p] * bt[z, j, p]
                out[z, i, j] = acc


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes with leading axes broadcast.

    The contraction is accumulated strictly left to right over the inner
    index (no pairwise or blocked summation, no fused multiply-add), so
    results are bit-reproducible independent of BLAS and threading.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    if b.shape[-2] != k:
        raise ShapeError(
            f"matmul inner extents differ: a is {a.shape} (k={k}), b is {b.shape} (k={b.shape[-2]})"
        )
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    if k == 0:
        return np.zeros(lead + (m, n))
    a3 = np.ascontiguousarray(np.broadcast_to(a, lead + (m, k))).reshape(-1, m, k)
    bt = np.ascontiguousarray(np.swapaxes(np.broadcast_to(b, lead + (k, n)), -1, -2)).reshape(-1, n, k)
    out = np.empty((a3.shape[0], m, n))
    _bmm(a3, bt, out)
    return out.reshape(lead + (m, n))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    x = as_tensor(x)
    return x * sigmoid(x)


def group_norm_st(x: np.ndarray, groups: int, eps: float = 1e-5) -> np.ndarray:
    """Spatio-temporal group norm.

    Statistics for each group are pooled over frames, rows, columns and the
    group's channels; a leading batch axis (rank 5 input) is normalized per
    sample.  No affine parameters.
    """
    x = as_tensor(x)
    if x.ndim not in (4, 5):
        raise ShapeError(f"group_norm_st expects (F,h,w,c) or (b,F,h,w,c), got {x.shape}")
    c = x.shape[-1]
    if groups <= 0 or c % groups:
        raise ShapeError(f"channel count {c} is not divisible by groups={groups}")
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    b = x.shape[0]
    g = x.reshape(b, -1, groups, c // groups)
    mean = g.mean(axis=(1, 3), keepdims=True)
    var = ((g - mean) ** 2).mean(axis=(1, 3), keepdims=True)
    out = ((g - mean) / np.sqrt(var + eps)).reshape(x.shape)
    return out[0] if squeeze else out


def layer_norm(x: np.ndarray, gamma=None, beta=None, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    out = (x - mean) / np.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def linear(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    """Affine map over the last axis: ``x @ weight + bias``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    out = matmul(x.reshape(-1, x.shape[-1]), weight).reshape(*lead, weight.shape[1])
    if bias is not None:
        out = out + bias
    return out


def conv2d(x: np.ndarray, kernel: np.ndarray, bias=None) -> np.ndarray:
    """Stride-1 'same' convolution with zero padding over (h, w).

    ``x`` is (..., h, w, c_in); ``kernel`` is (kh, kw, c_in, c_out) with odd
    spatial extents.  Cross-correlation convention (no kernel flip).
    """
    x = as_tensor(x)
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    h, w = x.shape[-3], x.shape[-2]
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(x, pad)
    cols = [xp[..., i:i + h, j:j + w, :] for i in range(kh) for j in range(kw)]
    patches = np.concatenate(cols, axis=-1)
    out = linear(patches, kernel.reshape(kh * kw * cin, cout))
    if bias is not None:
        out = out + bias
    return out


def conv1d(x: np.ndarray, kernel: np.ndarray, bias=None) -> np.ndarray:
    """'same' 1-D convolution along the feature axis, token axis as channels.

    ``x`` is (t_in, d); ``kernel`` is (t_out, t_in, k) with odd ``k``;
    result is (t_out, d).
    """
    x = as_tensor(x)
    tout, tin, k = kernel.shape
    if x.ndim != 2 or x.shape[0] != tin:
        raise ShapeError(f"conv1d: expected ({tin}, d) input, got {x.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel size must be odd, got {k}")
    d = x.shape[1]
    p = k // 2
    xp = np.pad(x, [(0, 0), (p, p)])
    # rows ordered (tap, token) to match the kernel transpose below
    cols = np.concatenate([xp[:, s:s + d] for s in range(k)], axis=0)
    w2 = kernel.transpose(0, 2, 1).reshape(tout, k * tin)
    out = matmul(w2, cols)
    if bias is not None:
        out = out + np.asarray(bias)[:, None]
    return out


def multihead_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int,
                        return_weights: bool = False):
    """Scaled dot-product attention with heads split from the channel axis.

    q: (..., Lq, C), k and v: (..., Lk, C).  Leading axes are independent
    problems (e.g. one per pixel for temporal attention).
    """
    C = q.shape[-1]
    if k.shape[-1] != C or v.shape[-1] != C or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    if C % heads:
        raise ShapeError(f"channels {C} not divisible by heads={heads}")
    dh = C // heads

    def split(t):
        t = t.reshape(*t.shape[:-1], heads, dh)
        return np.moveaxis(t, -2, -3)  # (..., heads, L, dh)

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, np.swapaxes(kh, -1, -2)) / np.sqrt(dh)
    weights = softmax_rows(scores)
    out = matmul(weights, vh)
    out = np.moveaxis(out, -3, -2).reshape(*q.shape[:-1], C)
    if return_weights:
        return out, weights
    return out


def bilinear_resize(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize (..., h, w, c) with half-pixel-centre bilinear sampling."""
    x = as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    if (h, w) == (height, width):
        return x.copy()

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, height)
    x0, x1, fx = axis_weights(w, width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    rows0 = x[..., y0, :, :]
    rows1 = x[..., y1, :, :]
    top = rows0[..., :, x0, :] * (1 - fx) + rows0[..., :, x1, :] * fx
    bot = rows1[..., :, x0, :] * (1 - fx) + rows1[..., :, x1, :] * fx
    return top * (1 - fy) + bot * fy


def zero_pad_spatial(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Centre (..., h, w, c) inside a zero canvas of (height, width)."""
    x = as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    if height < h or width < w:
        raise ShapeError(f"cannot pad {h}x{w} down to {height}x{width}")
    top, left = (height - h) // 2, (width - w) // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(top, height - h - top), (left, width - w - left), (0, 0)]
    return np.pad(x, pad)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """2x2 mean pooling over (h, w) of (..., h, w, c); extents must be even."""
    h, w = x.shape[-3], x.shape[-2]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {h}x{w}")
    y = x.reshape(*x.shape[:-3], h // 2, 2, w // 2, 2, x.shape[-1])
    return y.mean(axis=(-4, -2))


def upsample_nearest2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=-3), 2, axis=-2)


def sinusoidal_embedding(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    positions = np.atleast_1d(np.asarray(positions, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=-1)
    return emb
