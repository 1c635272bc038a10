"""A miniature video UNet noise predictor with fixed seeded weights.

Topology per resolution level: residual conv block (with timestep
embedding), spatial cross-attention over the text context, per-pixel temporal
self-attention.  Encoder levels emit long-range skip connections which the
decoder concatenates back; conditioning modules can rewrite those skips.

The prediction is ``eps_skip * sqrt(1 - abar_t) * x_t + net(x_t)``: the first
term is the exact noise predictor for unit-variance Gaussian data, which keeps
untrained sampling numerically tame; the second is the network residual.
Weights are a flat ``dict[str, ndarray]`` keyed by dotted parameter names.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .diffusion import Schedule
from .rng import RngStream
from .tensor import (
    ShapeError,
    avg_pool2,
    conv2d,
    group_norm_st,
    layer_norm,
    linear,
    multihead_attention,
    silu,
    sinusoidal_embedding,
    upsample_nearest2,
)

N_TEXT_TOKENS = 77

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class UNetConfig:
    F: int = 16
    h: int = 8
    w: int = 8
    c: int = 4
    level_channels: tuple[int, ...] = (8, 16)
    heads: int = 2
    d_text: int = 32
    groups: int = 2
    temb_dim: int = 16
    in_channels: int | None = None

    def __post_init__(self):
        if min(self.F, self.h, self.w, self.c) <= 0:
            raise ValueError("extents must be positive")
        if len(self.level_channels) < 2:
            raise ValueError("need at least two levels so a long-range skip exists")
        scale = 2 ** (len(self.level_channels) - 1)
        if self.h % scale or self.w % scale:
            raise ValueError(f"h and w must be divisible by {scale}")
        for ch in self.level_channels:
            if ch % self.groups or ch % self.heads:
                raise ValueError(f"channels {ch} must divide by groups and heads")

    @property
    def levels(self) -> int:
        return len(self.level_channels)

    @property
    def input_channels(self) -> int:
        return self.in_channels or self.c

    @property
    def n_cross_layers(self) -> int:
        # encoder levels, middle, decoder levels
        return 2 * self.levels + 1


def _normal(rng: RngStream, name: str, shape, scale: float) -> np.ndarray:
    return rng.fork(name).normal(shape) * scale


def _block_params(p: Params, rng: RngStream, prefix: str, C: int, cfg: UNetConfig):
    p[f"{prefix}.res.gn_g"] = np.ones(C)
    p[f"{prefix}.res.gn_b"] = np.zeros(C)
    p[f"{prefix}.res.conv_w"] = _normal(rng, f"{prefix}.res.conv_w", (3, 3, C, C), 0.5 / np.sqrt(9 * C))
    p[f"{prefix}.res.conv_b"] = np.zeros(C)
    p[f"{prefix}.res.temb_w"] = _normal(rng, f"{prefix}.res.temb_w", (cfg.temb_dim, C), 1.0 / np.sqrt(cfg.temb_dim))
    for name, rows in (("q", C), ("k", cfg.d_text), ("v", cfg.d_text), ("o", C)):
        p[f"{prefix}.xattn.{name}"] = _normal(rng, f"{prefix}.xattn.{name}", (rows, C), 1.0 / np.sqrt(rows))
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.tattn.{name}"] = _normal(rng, f"{prefix}.tattn.{name}", (C, C), 1.0 / np.sqrt(C))


def init_unet_weights(cfg: UNetConfig = UNetConfig(), seed: int = 0) -> Params:
    """Seeded weights; each tensor draws from its own named stream."""
    rng = RngStream(seed).fork("unet")
    ch = cfg.level_channels
    p: Params = {}
    p["conv_in.w"] = _normal(rng, "conv_in.w", (3, 3, cfg.input_channels, ch[0]),
                             1.0 / np.sqrt(9 * cfg.input_channels))
    p["conv_in.b"] = np.zeros(ch[0])
    p["temb.w"] = _normal(rng, "temb.w", (cfg.temb_dim, cfg.temb_dim), 1.0 / np.sqrt(cfg.temb_dim))
    p["temb.b"] = np.zeros(cfg.temb_dim)
    for l, C in enumerate(ch):
        _block_params(p, rng, f"enc{l}", C, cfg)
        if l + 1 < cfg.levels:
            p[f"down{l}.w"] = _normal(rng, f"down{l}.w", (C, ch[l + 1]), 1.0 / np.sqrt(C))
            p[f"down{l}.b"] = np.zeros(ch[l + 1])
    _block_params(p, rng, "mid", ch[-1], cfg)
    for l in reversed(range(cfg.levels)):
        C = ch[l]
        p[f"dec{l}.merge.w"] = _normal(rng, f"dec{l}.merge.w", (2 * C, C), 1.0 / np.sqrt(2 * C))
        p[f"dec{l}.merge.b"] = np.zeros(C)
        _block_params(p, rng, f"dec{l}", C, cfg)
        if l > 0:
            p[f"up{l}.w"] = _normal(rng, f"up{l}.w", (C, ch[l - 1]), 1.0 / np.sqrt(C))
            p[f"up{l}.b"] = np.zeros(ch[l - 1])
    p["out.gn_g"] = np.ones(ch[0])
    p["out.gn_b"] = np.zeros(ch[0])
    p["out.conv_w"] = _normal(rng, "out.conv_w", (3, 3, ch[0], cfg.c), 0.1 / np.sqrt(9 * ch[0]))
    p["out.conv_b"] = np.zeros(cfg.c)
    p["out.eps_skip"] = np.ones(1)
    return p


def encoder_param_names(cfg: UNetConfig) -> list[str]:
    """Parameters used by the encoder half (conv_in, time embedding, enc/down)."""
    return [k for k in init_unet_weights(cfg).keys()
            if k.startswith(("conv_in.", "temb.", "enc", "down"))]


def time_embedding(t: int, p: Params, cfg: UNetConfig) -> np.ndarray:
    emb = sinusoidal_embedding([t], cfg.temb_dim)[0]
    return silu(linear(emb[None], p["temb.w"], p["temb.b"]))[0]


def _res_block(h, temb, p, prefix, groups):
    r = group_norm_st(h, groups) * p[f"{prefix}.gn_g"] + p[f"{prefix}.gn_b"]
    r = conv2d(silu(r), p[f"{prefix}.conv_w"], p[f"{prefix}.conv_b"])
    return h + r + linear(temb[None], p[f"{prefix}.temb_w"])[0]


def _cross_attention(h, ctx, p, prefix, heads):
    tokens = h.reshape(-1, h.shape[-1])
    q = linear(layer_norm(tokens), p[f"{prefix}.q"])
    k = linear(ctx, p[f"{prefix}.k"])
    v = linear(ctx, p[f"{prefix}.v"])
    out = multihead_attention(q, k, v, heads)
    return h + linear(out, p[f"{prefix}.o"]).reshape(h.shape)


def _temporal_attention(h, p, prefix, heads):
    F, hh, ww, C = h.shape
    seq = h.transpose(1, 2, 0, 3).reshape(hh * ww, F, C)
    x = layer_norm(seq + sinusoidal_embedding(np.arange(F), C))
    q = linear(x, p[f"{prefix}.q"])
    k = linear(x, p[f"{prefix}.k"])
    v = linear(x, p[f"{prefix}.v"])
    out = linear(multihead_attention(q, k, v, heads), p[f"{prefix}.o"])
    return h + out.reshape(hh, ww, F, C).transpose(2, 0, 1, 3)


def _level_block(h, temb, ctx, p, prefix, cfg):
    h = _res_block(h, temb, p, f"{prefix}.res", cfg.groups)
    h = _cross_attention(h, ctx, p, f"{prefix}.xattn", cfg.heads)
    return _temporal_attention(h, p, f"{prefix}.tattn", cfg.heads)


def _layer_contexts(context, cfg: UNetConfig) -> list[np.ndarray]:
    if isinstance(context, np.ndarray):
        ctxs = [context] * cfg.n_cross_layers
    else:
        ctxs = list(context)
        if len(ctxs) != cfg.n_cross_layers:
            raise ShapeError(f"expected {cfg.n_cross_layers} per-layer contexts, got {len(ctxs)}")
    for ctx in ctxs:
        if ctx.ndim != 2 or ctx.shape[1] != cfg.d_text:
            raise ShapeError(f"context must be (tokens, {cfg.d_text}), got {ctx.shape}")
    return ctxs


def encode(x, temb, contexts, p: Params, cfg: UNetConfig, fuse=None, trace=None):
    """Encoder half: returns the skip features (one per level) and the bottleneck.

    ``fuse`` is added right after the first level's temporal attention.
    ``trace``, if a list, receives every intermediate activation.
    """
    h = conv2d(x, p["conv_in.w"], p["conv_in.b"])
    if trace is not None:
        trace.append(h)
    skips = []
    for l in range(cfg.levels):
        h = _level_block(h, temb, contexts[l], p, f"enc{l}", cfg)
        if l == 0 and fuse is not None:
            h = h + fuse
        skips.append(h)
        if trace is not None:
            trace.append(h)
        if l + 1 < cfg.levels:
            h = linear(avg_pool2(h), p[f"down{l}.w"], p[f"down{l}.b"])
            if trace is not None:
                trace.append(h)
    return skips, h


def unet_epsilon(x_t: np.ndarray, t: int, context, weights: Params, cfg: UNetConfig,
                 schedule: Schedule, cam=None, skip_residuals: Sequence[np.ndarray] | None = None):
    """Noise prediction for a latent chunk of shape (F, h, w, in_channels).

    ``context`` is one (77, d_text) token matrix or one per cross-attention
    layer.  ``cam`` is any object with ``apply(level, x_sc)`` rewriting a skip
    connection; ``skip_residuals`` are added to the skips (additive control).
    """
    expected = (x_t.shape[0], cfg.h, cfg.w, cfg.input_channels)
    if x_t.ndim != 4 or x_t.shape[1:] != expected[1:]:
        raise ShapeError(f"latent must be (F, {cfg.h}, {cfg.w}, {cfg.input_channels}), got {x_t.shape}")
    ctxs = _layer_contexts(context, cfg)
    temb = time_embedding(t, weights, cfg)
    skips, h = encode(x_t, temb, ctxs, weights, cfg)
    h = _level_block(h, temb, ctxs[cfg.levels], weights, "mid", cfg)
    for l in reversed(range(cfg.levels)):
        skip = skips[l]
        if skip_residuals is not None:
            skip = skip + skip_residuals[l]
        if cam is not None:
            skip = cam.apply(l, skip)
        h = linear(np.concatenate([h, skip], axis=-1), weights[f"dec{l}.merge.w"], weights[f"dec{l}.merge.b"])
        h = _level_block(h, temb, ctxs[2 * cfg.levels - l], weights, f"dec{l}", cfg)
        if l > 0:
            h = linear(upsample_nearest2(h), weights[f"up{l}.w"], weights[f"up{l}.b"])
    r = group_norm_st(h, cfg.groups) * weights["out.gn_g"] + weights["out.gn_b"]
    r = conv2d(silu(r), weights["out.conv_w"], weights["out.conv_b"])
    z = x_t[..., : cfg.c]
    return weights["out.eps_skip"][0] * np.sqrt(1.0 - schedule.abar(t)) * z + r


@dataclass
class VideoUNet:
    """Callable denoiser bundling config, weights and schedule."""

    cfg: UNetConfig
    weights: Params
    schedule: Schedule = field(repr=False)

    def __call__(self, x_t, t, context=None, cam=None, skip_residuals=None):
        if context is None:
            raise ValueError("the UNet needs a text context")
        return unet_epsilon(x_t, t, context, self.weights, self.cfg, self.schedule, cam, skip_residuals)


def widen_first_conv(weights: Params, cfg: UNetConfig, extra_channels: int,
                     seed: int | None = None) -> tuple[Params, UNetConfig]:
    """Extend ``conv_in`` to accept ``extra_channels`` more input channels.

    The new kernel slice is zero unless ``seed`` is given.
    """
    w = weights["conv_in.w"]
    shape = w.shape[:2] + (extra_channels, w.shape[3])
    extra = np.zeros(shape) if seed is None else RngStream(seed).fork("conv_in.extra").normal(shape) * 0.1
    new = dict(weights)
    new["conv_in.w"] = np.concatenate([w, extra], axis=2)
    return new, replace(cfg, in_channels=cfg.input_channels + extra_channels)
