"""Video evaluation metrics: OFS, warp error, MAWE, scene cuts, re-ID, flow-std."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .flow import FlowField, optical_flow, to_luma, warp_bilinear


class StaticVideoError(ValueError):
    """Raised when a motion-normalised metric is requested for a motionless video."""


@dataclass(frozen=True)
class FlowParams:
    iters: int = 100
    lam: float = 0.1
    levels: int = 3


@dataclass
class MetricReport:
    mawe: float | None = None
    ofs: float | None = None
    warp_error: float | None = None
    scuts: int | None = None
    flow_std: float | None = None
    reid: float | None = None

    def rows(self):
        """(name, value) pairs for the metrics that are present, in field order."""
        return [(f.name, getattr(self, f.name)) for f in fields(self) if getattr(self, f.name) is not None]


def _check_video(video, min_frames=2):
    video = np.asarray(video, dtype=np.float64)
    if video.ndim not in (3, 4):
        raise ValueError(f"video must be (N,h,w) or (N,h,w,c), got shape {video.shape}")
    if video.shape[0] < min_frames:
        raise ValueError(f"need at least {min_frames} frames, got {video.shape[0]}")
    return video


def video_flows(video, params: FlowParams = FlowParams()) -> list[FlowField]:
    video = _check_video(video)
    return [optical_flow(video[f], video[f + 1], params.iters, params.lam, params.levels)
            for f in range(len(video) - 1)]


def ofs(video, params: FlowParams = FlowParams(), flows=None) -> float:
    """Mean squared flow magnitude over all pixels of all consecutive pairs."""
    flows = flows if flows is not None else video_flows(video, params)
    return float(np.mean([np.mean(f.u**2 + f.v**2) for f in flows]))


def warp_error(video, occlusion_thresh: float = 0.5, params: FlowParams = FlowParams(),
               flows=None) -> float:
    """Mean squared distance between each frame and its flow-warped successor.

    Pixels whose forward flow is not undone by the backward flow (squared
    round-trip residual above ``occlusion_thresh``) or that warp outside the
    frame are excluded.  The per-pixel distance is averaged over channels.
    """
    video = _check_video(video)
    flows = flows if flows is not None else video_flows(video, params)
    total, count = 0.0, 0
    for f, fwd in enumerate(flows):
        a, b = video[f], video[f + 1]
        bwd = optical_flow(b, a, params.iters, params.lam, params.levels)
        warped, inside = warp_bilinear(b, fwd.u, fwd.v)
        bu, _ = warp_bilinear(bwd.u, fwd.u, fwd.v)
        bv, _ = warp_bilinear(bwd.v, fwd.u, fwd.v)
        valid = inside & ((fwd.u + bu) ** 2 + (fwd.v + bv) ** 2 <= occlusion_thresh)
        if not valid.any():
            continue
        d = (a - warped) ** 2
        if d.ndim == 3:
            d = d.mean(axis=-1)
        total += float(d[valid].sum())
        count += int(valid.sum())
    if count == 0:
        raise ValueError("every pixel of every frame pair is occluded")
    return total / count


def mawe(video, occlusion_thresh: float = 0.5, params: FlowParams = FlowParams(),
         floor: float = 1e-6) -> float:
    """Motion-aware warp error: warp error divided by OFS."""
    flows = video_flows(video, params)
    motion = ofs(video, params, flows)
    if motion <= floor:
        raise StaticVideoError("undefined: static video")
    return warp_error(video, occlusion_thresh, params, flows) / motion


def content_values(video) -> np.ndarray:
    """Mean absolute luma difference for each consecutive frame pair."""
    video = _check_video(video)
    luma = np.stack([to_luma(fr) for fr in video])
    return np.abs(np.diff(luma, axis=0)).mean(axis=(1, 2))


def detect_cuts(video, window: int = 2, adaptive_ratio: float = 3.0,
                min_content: float = 15.0 / 255.0) -> list[int]:
    """Indices ``p`` of frame pairs (p, p+1) declared as hard cuts.

    A pair is a cut when its content value is at least ``adaptive_ratio``
    times the mean content of the ``window`` pairs on either side, and at
    least ``min_content``.  Only pairs with full windows are evaluated.
    """
    video = _check_video(video, 2 * window + 2)
    content = content_values(video)
    cuts = []
    for p in range(window, len(content) - window):
        neighbours = np.concatenate([content[p - window:p], content[p + 1:p + 1 + window]])
        ref = neighbours.mean()
        score = content[p] / ref if ref > 0 else np.inf
        if score >= adaptive_ratio and content[p] >= min_content:
            cuts.append(p)
    return cuts


def scuts(video, window: int = 2, adaptive_ratio: float = 3.0,
          min_content: float = 15.0 / 255.0) -> int:
    return len(detect_cuts(video, window, adaptive_ratio, min_content))


def _max_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    na[na == 0] = np.inf
    nb[nb == 0] = np.inf
    return float(((a / na) @ (b / nb).T).max())


def reid_score(detections) -> float:
    """Identity preservation across consecutive frames.

    ``detections`` holds one (n_i, d) array of feature vectors per frame
    (n_i may be 0).  Each consecutive pair contributes its best cosine match
    (0 if either frame is empty); the sum is divided by the number of frames
    with at least one detection.
    """
    frames = [np.asarray(d, dtype=np.float64).reshape(len(d), -1) if len(d) else np.zeros((0, 0))
              for d in detections]
    if len(frames) < 2:
        raise ValueError("re-id needs at least 2 frames")
    m = sum(1 for fr in frames if len(fr))
    if m == 0:
        raise ValueError("no identities: no frame has a detection")
    total = 0.0
    for cur, nxt in zip(frames, frames[1:]):
        if len(cur) and len(nxt):
            total += _max_cosine(cur, nxt)
    return total / m


def flow_std_smoothness(video, params: FlowParams = FlowParams(), flows=None) -> float:
    """Per-pair standard deviation of flow magnitudes, averaged over pairs."""
    flows = flows if flows is not None else video_flows(video, params)
    return float(np.mean([np.std(f.magnitude) for f in flows]))


METRIC_NAMES = ("mawe", "ofs", "warp_error", "scuts", "flow_std", "reid")
