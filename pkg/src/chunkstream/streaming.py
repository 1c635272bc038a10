"""Autoregressive long-video generation in fixed-size chunks.

The first chunk is plain text-to-video.  Every later chunk is conditioned on
the previous chunk's last ``F_cond`` frames (CAM) and on an anchor frame from
the first chunk (APM), with three-branch classifier-free guidance.  Chunk
``n`` draws all of its randomness from ``rng.fork("chunk", n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .apm import ApmConfig, anchor_contexts, init_apm_weights, select_anchor, stub_text_tokens
from .cam import CamConfig, encode_condition, init_cam_weights
from .diffusion import GuidanceWeights, cfg_epsilon, ddim_sample, ddim_timesteps, make_schedule
from .refine import (  # noqa: F401  re-exported: the refinement stage lives in refine.py
    MODES,
    ChunkPlan,
    randomized_blend,
    refine_video,
    sample_fthr,
    shared_noise,
    split_into_chunks,
)
from .rng import RngStream
from .videoldm import Params, UNetConfig, VideoUNet, init_unet_weights


@dataclass(frozen=True)
class GenerationPlan:
    total_frames: int
    prompt: str
    seed: int
    F: int = 16
    F_cond: int = 8
    steps: int = 50
    eta: float = 1.0
    guidance: GuidanceWeights = GuidanceWeights()

    def __post_init__(self):
        if self.total_frames < self.F or self.total_frames % self.F:
            raise ValueError(f"frame count must be a positive multiple of {self.F}, got {self.total_frames}")
        if not 1 <= self.F_cond <= self.F:
            raise ValueError(f"need 1 <= F_cond <= F, got F_cond={self.F_cond}")

    @property
    def n_chunks(self) -> int:
        return self.total_frames // self.F


@dataclass
class StreamState:
    anchor: np.ndarray
    prev_tail: np.ndarray
    frames_emitted: int


@dataclass
class Pipeline:
    """UNet plus optional CAM and APM weights.  ``None`` disables a module."""

    unet: VideoUNet
    cam_weights: Params | None = None
    apm_weights: Params | None = None
    apm_cfg: ApmConfig = ApmConfig()
    text_seed: int = 0

    @property
    def cfg(self) -> UNetConfig:
        return self.unet.cfg

    def text(self, prompt: str) -> np.ndarray:
        return stub_text_tokens(prompt, self.cfg.d_text, self.text_seed)


def build_pipeline(ucfg: UNetConfig = UNetConfig(), weight_seed: int = 0, cam: bool = True,
                   apm: bool = True, schedule=None) -> Pipeline:
    """Fresh pipeline: seeded UNet, CAM with zero output projections, APM with zero gates."""
    schedule = schedule if schedule is not None else make_schedule()
    weights = init_unet_weights(ucfg, weight_seed)
    apm_cfg = ApmConfig(d=ucfg.d_text)
    return Pipeline(
        unet=VideoUNet(ucfg, weights, schedule),
        cam_weights=init_cam_weights(weights, ucfg, weight_seed) if cam else None,
        apm_weights=init_apm_weights(apm_cfg, ucfg.n_cross_layers, weight_seed) if apm else None,
        apm_cfg=apm_cfg,
    )


def _sample_chunk(eps_fn: Callable, pipe: Pipeline, plan: GenerationPlan, stream: RngStream) -> np.ndarray:
    cfg = pipe.cfg
    s = pipe.unet.schedule
    x_T = stream.fork("x_T").normal((plan.F, cfg.h, cfg.w, cfg.c))
    return ddim_sample(eps_fn, x_T, s, ddim_timesteps(s.T, plan.steps), plan.eta, stream.fork("ddim"))


def generate_first_chunk(plan: GenerationPlan, pipe: Pipeline, rng: RngStream) -> np.ndarray:
    """Text-only generation; the anchor branch of the guidance equals the text branch."""
    text, null = pipe.text(plan.prompt), pipe.text("")

    def eps_fn(x, t):
        e_null = pipe.unet(x, t, null)
        e_text = pipe.unet(x, t, text)
        return cfg_epsilon(e_null, e_text, e_text, plan.guidance)

    return _sample_chunk(eps_fn, pipe, plan, rng.fork("chunk", 0))


def generate_next_chunk(state: StreamState, plan: GenerationPlan, pipe: Pipeline, rng: RngStream,
                        index: int) -> np.ndarray:
    """Chunk ``index`` conditioned on ``state``; advances ``state`` in place."""
    text, null = pipe.text(plan.prompt), pipe.text("")
    cam = None
    if pipe.cam_weights is not None:
        cam = encode_condition(state.prev_tail, pipe.cam_weights, pipe.cfg,
                               CamConfig(plan.F, plan.F_cond), text)
    if pipe.apm_weights is not None:
        ctx_null = anchor_contexts(None, null, pipe.apm_weights, pipe.apm_cfg)
        ctx_text = anchor_contexts(None, text, pipe.apm_weights, pipe.apm_cfg)
        ctx_full = anchor_contexts(state.anchor, text, pipe.apm_weights, pipe.apm_cfg)
    else:
        ctx_null, ctx_text, ctx_full = null, text, None

    def eps_fn(x, t):
        e_null = pipe.unet(x, t, ctx_null, cam=cam)
        e_text = pipe.unet(x, t, ctx_text, cam=cam)
        # without APM the anchor is not an input, so the full branch is the text branch
        e_full = e_text if ctx_full is None else pipe.unet(x, t, ctx_full, cam=cam)
        return cfg_epsilon(e_null, e_text, e_full, plan.guidance)

    chunk = _sample_chunk(eps_fn, pipe, plan, rng.fork("chunk", index))
    state.prev_tail = chunk[plan.F - plan.F_cond:].copy()
    state.frames_emitted += plan.F
    return chunk


@dataclass
class StreamLog:
    """States observed after each chunk (for invariant checks)."""

    states: list[tuple[np.ndarray, np.ndarray, int]] = field(default_factory=list)


def generate_video(plan: GenerationPlan, pipe: Pipeline, log: StreamLog | None = None,
                   progress: Callable[[int, int], None] | None = None) -> np.ndarray:
    rng = RngStream(plan.seed)
    first = generate_first_chunk(plan, pipe, rng)
    anchor = first[select_anchor(first)].copy()
    state = StreamState(anchor=anchor, prev_tail=first[plan.F - plan.F_cond:].copy(), frames_emitted=plan.F)
    chunks = [first]
    if log is not None:
        log.states.append((state.anchor.copy(), state.prev_tail.copy(), state.frames_emitted))
    if progress:
        progress(1, plan.n_chunks)
    for n in range(1, plan.n_chunks):
        chunks.append(generate_next_chunk(state, plan, pipe, rng, n))
        if log is not None:
            log.states.append((state.anchor.copy(), state.prev_tail.copy(), state.frames_emitted))
        if progress:
            progress(n + 1, plan.n_chunks)
    return np.concatenate(chunks, axis=0)
