"""Chunked SDEdit refinement of a long video.

The video is cut into overlapping chunks of ``F_enh`` frames, each chunk is
noised to ``Tprime`` and denoised with DDIM.  Three ways of reconciling the
overlaps are supported:

``naive``       chunks use independent noise; overlaps are resolved by
                ``naive_overlap``: later chunk wins ("concat") or "average"
``shared``      overlap noise is copied from the preceding chunk at every draw;
                on overlaps the later chunk wins
``randomized``  shared noise, plus after every denoising step the overlap of
                the global latent is rebuilt from the left and right chunk at a
                random threshold frame
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffusion import Schedule, ddim_step, forward_diffuse, sdedit_timesteps
from .rng import RngStream
from .tensor import bilinear_resize

MODES = ("naive", "shared", "randomized")


@dataclass(frozen=True)
class ChunkPlan:
    total: int
    F_enh: int
    O: int
    starts: tuple[int, ...]

    def overlap(self, i: int) -> int:
        """Frames chunk ``i`` shares with chunk ``i - 1`` (0 for the first)."""
        if i == 0:
            return 0
        return self.starts[i - 1] + self.F_enh - self.starts[i]


def split_into_chunks(total: int, F_enh: int = 24, O: int = 8) -> ChunkPlan:
    if not 0 <= O < F_enh:
        raise ValueError(f"overlap must satisfy 0 <= O < F_enh, got O={O}, F_enh={F_enh}")
    if total < F_enh:
        raise ValueError(f"video has {total} frames, fewer than one chunk of {F_enh}")
    stride = F_enh - O
    starts = list(range(0, total - F_enh + 1, stride))
    if starts[-1] + F_enh < total:
        starts.append(total - F_enh)
    return ChunkPlan(total, F_enh, O, tuple(starts))


def shared_noise(prev: np.ndarray, rng: RngStream, overlap: int) -> np.ndarray:
    """Noise for the next chunk: the last ``overlap`` frames of ``prev``, then fresh."""
    fresh = rng.normal((prev.shape[0] - overlap,) + prev.shape[1:])
    return np.concatenate([prev[prev.shape[0] - overlap:], fresh], axis=0)


def sample_fthr(rng: RngStream, O: int) -> int:
    """Uniform threshold in {0, ..., O}."""
    if O < 0:
        raise ValueError("O must be >= 0")
    return int(rng.integers(O + 1)[0])


def randomized_blend(xL: np.ndarray, xR: np.ndarray, O: int, f_thr: int) -> np.ndarray:
    """Overlap frames built from the left/right chunk latents.

    ``xL`` and ``xR`` are the O overlap frames as seen by the left and right
    chunk.  Overlap frame f (1-based) comes from ``xL`` iff f <= O - f_thr,
    so with uniform ``f_thr`` it is taken from the left chunk with
    probability 1 - f / (O + 1).
    """
    if not 0 <= f_thr <= O:
        raise ValueError(f"f_thr={f_thr} outside [0, {O}]")
    if len(xL) != O or len(xR) != O:
        raise ValueError(f"overlap latents must have {O} frames, got {len(xL)} and {len(xR)}")
    cut = O - f_thr
    return np.concatenate([xL[:cut], xR[cut:]], axis=0)


@dataclass
class RefineTrace:
    """Per-step record of the noise each chunk used (for verification)."""

    noises: list[list[np.ndarray]] = field(default_factory=list)
    thresholds: list[list[int]] = field(default_factory=list)


def _chunk_noises(plan: ChunkPlan, shape, rng: RngStream, shared: bool, key) -> list[np.ndarray]:
    out = []
    for i in range(len(plan.starts)):
        stream = rng.fork(key, i)
        if shared and i > 0:
            out.append(shared_noise(out[-1], stream, plan.overlap(i)))
        else:
            out.append(stream.normal((plan.F_enh,) + shape))
    return out


def refine_video(video: np.ndarray, mode: str, Tprime: int, denoiser: Callable,
                 s: Schedule, steps: int, rng: RngStream, F_enh: int = 24, O: int = 8,
                 eta: float = 1.0, upscale: tuple[int, int] | None = None,
                 naive_overlap: str = "concat", trace: RefineTrace | None = None) -> np.ndarray:
    """Refine a long video chunk by chunk; ``denoiser(x_t, t)`` predicts noise.

    ``upscale`` optionally bilinearly resizes frames to (height, width)
    before refinement.
    """
    if mode not in MODES:
        raise ValueError(f"unknown refinement mode {mode!r}; expected one of {MODES}")
    if not 1 <= Tprime < s.T:
        raise ValueError(f"Tprime must satisfy 1 <= Tprime < T={s.T}, got {Tprime}")
    video = np.asarray(video, dtype=np.float64)
    if upscale is not None:
        video = bilinear_resize(video, *upscale)
    plan = split_into_chunks(len(video), F_enh, O)
    frame_shape = video.shape[1:]
    shared = mode != "naive"
    spans = [slice(st, st + F_enh) for st in plan.starts]

    init = _chunk_noises(plan, frame_shape, rng, shared, "init")
    timesteps = sdedit_timesteps(Tprime, steps)

    if mode == "randomized":
        # one global latent; chunks read their window and are stitched back
        x = np.empty_like(video)
        for span, eps in zip(spans, init):
            x[span] = forward_diffuse(video[span], Tprime, eps, s)
        for k, t in enumerate(timesteps):
            t_prev = timesteps[k + 1] if k + 1 < len(timesteps) else 0
            noises = _chunk_noises(plan, frame_shape, rng, True, ("step", k))
            outs = [ddim_step(x[span], denoiser(x[span], t), t, t_prev, eta, s, noise=eps)
                    for span, eps in zip(spans, noises)]
            thr_stream = rng.fork("fthr", k)
            thresholds = []
            new = np.empty_like(x)
            new[spans[0]] = outs[0]
            for i in range(1, len(spans)):
                ov = plan.overlap(i)
                st = plan.starts[i]
                f_thr = sample_fthr(thr_stream, ov)
                thresholds.append(f_thr)
                new[st:st + ov] = randomized_blend(new[st:st + ov], outs[i][:ov], ov, f_thr)
                new[st + ov:st + F_enh] = outs[i][ov:]
            x = new
            if trace is not None:
                trace.noises.append(noises)
                trace.thresholds.append(thresholds)
        return x

    results = []
    step_noises = [_chunk_noises(plan, frame_shape, rng, shared, ("step", k))
                   for k in range(len(timesteps))]
    for i, span in enumerate(spans):
        xi = forward_diffuse(video[span], Tprime, init[i], s)
        for k, t in enumerate(timesteps):
            t_prev = timesteps[k + 1] if k + 1 < len(timesteps) else 0
            xi = ddim_step(xi, denoiser(xi, t), t, t_prev, eta, s, noise=step_noises[k][i])
        results.append(xi)
    if trace is not None:
        trace.noises.extend(step_noises)

    out = np.zeros_like(video)
    if naive_overlap not in ("concat", "average"):
        raise ValueError(f"naive_overlap must be 'concat' or 'average', got {naive_overlap!r}")
    if mode == "shared" or naive_overlap == "concat":
        for span, r in zip(spans, results):
            out[span] = r
        return out
    weight = np.zeros(len(video))
    for span, r in zip(spans, results):
        out[span] += r
        weight[span] += 1.0
    return out / weight.reshape(-1, *([1] * (video.ndim - 1)))
