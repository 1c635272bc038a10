"""Toy harness comparing the three chunk-refinement modes by flow smoothness."""

from __future__ import annotations

import numpy as np

from .diffusion import Schedule, make_schedule
from .metrics import FlowParams, flow_std_smoothness
from .oracle import SmoothVideoOracle
from .refine import MODES, refine_video
from .rng import RngStream

REFINER_RHO_FRAMES = 0.97
REFINER_RHO_SPACE = 0.8


def moving_sinusoid_video(frames: int, size: int = 16, channels: int = 1, speed: float = 0.5) -> np.ndarray:
    """Two sinusoidal gratings translating horizontally at ``speed`` px/frame."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    out = []
    for f in range(frames):
        xx = x - speed * f
        out.append(0.5 + 0.2 * np.sin(2 * np.pi * xx / 16) + 0.15 * np.cos(2 * np.pi * (y / 8 + xx / 32)))
    return np.repeat(np.stack(out)[..., None], channels, axis=-1)


def fitted_refiner(video: np.ndarray, schedule: Schedule) -> SmoothVideoOracle:
    """Smooth-video denoiser whose mean and variance match ``video``."""
    return SmoothVideoOracle(schedule, sigma2=max(float(np.var(video)), 1e-8), mean=float(np.mean(video)),
                             rho_frames=REFINER_RHO_FRAMES, rho_space=REFINER_RHO_SPACE)


def run_blending_ablation(frames: int = 88, seeds: int = 8, Tprime: int = 600, steps: int = 50,
                          F_enh: int = 24, O: int = 8, schedule: Schedule | None = None,
                          params: FlowParams = FlowParams()) -> dict[str, list[float]]:
    """flow_std of the refined toy video for every mode and seed 0..seeds-1."""
    s = schedule if schedule is not None else make_schedule()
    video = moving_sinusoid_video(frames)
    refiner = fitted_refiner(video, s)
    results: dict[str, list[float]] = {m: [] for m in MODES}
    for seed in range(seeds):
        for mode in MODES:
            out = refine_video(video, mode, Tprime, refiner, s, steps, RngStream(seed), F_enh, O)
            results[mode].append(flow_std_smoothness(out, params))
    return results
