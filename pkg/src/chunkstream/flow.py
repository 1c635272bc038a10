"""Coarse-to-fine Horn-Schunck optical flow.

``flow(a, b)`` returns per-pixel displacements (u along columns, v along
rows) such that ``b(p + w(p)) ~= a(p)``.  Deterministic: fixed pyramid depth,
fixed iteration count, Jacobi updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u**2 + self.v**2)


def to_luma(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.shape[-1] == 3:
        return frame @ np.array([0.299, 0.587, 0.114])
    return frame.mean(axis=-1)


def warp_bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Sample ``img`` at (row + v, col + u), clamped at the border.

    Works on (h, w) or (h, w, c) images.  Also returns a mask of samples that
    fell inside the image.
    """
    h, w = img.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    y = rows + v
    x = cols + u
    inside = (y >= 0) & (y <= h - 1) & (x >= 0) & (x <= w - 1)
    y = np.clip(y, 0, h - 1)
    x = np.clip(x, 0, w - 1)
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = y - y0
    fx = x - x0
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, inside


def _neighbour_mean(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, 1, mode="edge")
    return 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])


def _gradients(img: np.ndarray):
    p = np.pad(img, 1, mode="edge")
    ix = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    iy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return ix, iy


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    return img[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _upsample_flow(f: np.ndarray, shape) -> np.ndarray:
    up = np.repeat(np.repeat(f, 2, axis=0), 2, axis=1) * 2.0
    out = np.zeros(shape)
    hh, ww = min(shape[0], up.shape[0]), min(shape[1], up.shape[1])
    out[:hh, :ww] = up[:hh, :ww]
    if hh < shape[0]:
        out[hh:, :ww] = out[hh - 1:hh, :ww]
    if ww < shape[1]:
        out[:, ww:] = out[:, ww - 1:ww]
    return out


def _horn_schunck(a, b, u, v, iters, lam):
    bw, _ = warp_bilinear(b, u, v)
    ix1, iy1 = _gradients(a)
    ix2, iy2 = _gradients(bw)
    ix = 0.5 * (ix1 + ix2)
    iy = 0.5 * (iy1 + iy2)
    it = bw - a
    denom = lam + ix**2 + iy**2
    du = np.zeros_like(a)
    dv = np.zeros_like(a)
    for _ in range(iters):
        # smoothness acts on the total flow, not only on the increment
        ubar = _neighbour_mean(u + du) - u
        vbar = _neighbour_mean(v + dv) - v
        r = (ix * ubar + iy * vbar + it) / denom
        du = ubar - ix * r
        dv = vbar - iy * r
    return u + du, v + dv


def optical_flow(a: np.ndarray, b: np.ndarray, iters: int = 100, lam: float = 0.1,
                 levels: int = 3) -> FlowField:
    a = to_luma(a)
    b = to_luma(b)
    if a.shape != b.shape:
        raise ValueError(f"frame extents differ: {a.shape} vs {b.shape}")
    pyramid = [(a, b)]
    for _ in range(levels - 1):
        pa, pb = pyramid[-1]
        if min(pa.shape) < 8:
            break
        pyramid.append((_downsample(pa), _downsample(pb)))
    u = np.zeros_like(pyramid[-1][0])
    v = np.zeros_like(u)
    for level, (pa, pb) in enumerate(reversed(pyramid)):
        if level:
            u = _upsample_flow(u, pa.shape)
            v = _upsample_flow(v, pa.shape)
        u, v = _horn_schunck(pa, pb, u, v, iters, lam)
    return FlowField(u, v)
