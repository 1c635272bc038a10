"""Conditional attention on the preceding chunk (short-term memory).

The last ``F_cond`` frames of the previous chunk go through a per-frame
convolutional encoder and a copy of the UNet encoder (the trunk).  Each
trunk skip feature then acts as keys and values in a temporal
cross-attention whose queries come from the matching UNet skip connection.
The result is added back onto that skip.  Every path into the UNet ends in
a zero-initialised projection, so a fresh module leaves the base model
unchanged.

Two ablation baselines are included: additive ControlNet-style injection of
a masked video ("add-cond") and channel concatenation at the UNet input
("conc-cond").
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .rng import RngStream
from .tensor import ShapeError, conv2d, group_norm_st, layer_norm, linear, multihead_attention, silu
from .videoldm import Params, UNetConfig, _layer_contexts, encode, encoder_param_names, time_embedding, widen_first_conv

ECOND_LAYERS = 3


@dataclass(frozen=True)
class CamConfig:
    F: int = 16
    F_cond: int = 8

    def __post_init__(self):
        if not 1 <= self.F_cond <= self.F:
            raise ValueError(f"need 1 <= F_cond <= F, got F_cond={self.F_cond}, F={self.F}")


def _econd_params(p: Params, rng: RngStream, prefix: str, c_in: int, C: int):
    for i in range(ECOND_LAYERS):
        cin = c_in if i == 0 else C
        p[f"{prefix}.conv{i}.w"] = rng.fork(f"{prefix}.conv{i}.w").normal((3, 3, cin, C)) / np.sqrt(9 * cin)
        p[f"{prefix}.conv{i}.b"] = np.zeros(C)
        p[f"{prefix}.ln{i}.g"] = np.ones(C)
        p[f"{prefix}.ln{i}.b"] = np.zeros(C)
    p[f"{prefix}.zero.w"] = np.zeros((1, 1, C, C))
    p[f"{prefix}.zero.b"] = np.zeros(C)


def _trunk_params(p: Params, unet_weights: Params, ucfg: UNetConfig):
    for name in encoder_param_names(ucfg):
        p[f"trunk.{name}"] = np.array(unet_weights[name], copy=True)


def init_cam_weights(unet_weights: Params, ucfg: UNetConfig, seed: int = 0) -> Params:
    """Fresh CAM: trunk copied from the UNet, zero output projections."""
    rng = RngStream(seed).fork("cam")
    p: Params = {}
    _econd_params(p, rng, "econd", ucfg.c, ucfg.level_channels[0])
    _trunk_params(p, unet_weights, ucfg)
    for l, C in enumerate(ucfg.level_channels):
        for name in ("P_in", "P_Q", "P_K", "P_V"):
            p[f"inject{l}.{name}"] = rng.fork(f"inject{l}.{name}").normal((C, C)) / np.sqrt(C)
        p[f"inject{l}.P_out"] = np.zeros((C, C))
    return p


def _trunk(p: Params, prefix: str = "trunk.") -> Params:
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


def frame_encoder(frames: np.ndarray, p: Params, prefix: str = "econd") -> np.ndarray:
    """Per-frame conv/LayerNorm/SiLU stack closed by the zero convolution."""
    h = frames
    for i in range(ECOND_LAYERS):
        h = conv2d(h, p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"])
        h = silu(layer_norm(h, p[f"{prefix}.ln{i}.g"], p[f"{prefix}.ln{i}.b"]))
    return conv2d(h, p[f"{prefix}.zero.w"], p[f"{prefix}.zero.b"])


def inject_skip(x_sc: np.ndarray, x_cam: np.ndarray, proj: dict[str, np.ndarray], groups: int,
                heads: int, return_weights: bool = False):
    """Temporal cross-attention from a UNet skip into CAM features, added residually.

    ``x_sc`` is (F, h, w, C) or (b, F, h, w, C); ``x_cam`` is the matching
    (F_cond, h, w, C) or (b, F_cond, h, w, C).  ``proj`` holds the C x C
    matrices P_in, P_Q, P_K, P_V and P_out.
    """
    squeeze = x_sc.ndim == 4
    if squeeze:
        x_sc, x_cam = x_sc[None], x_cam[None]
    if x_sc.ndim != 5 or x_cam.ndim != 5:
        raise ShapeError(f"inject_skip expects rank-4 or rank-5 tensors, got {x_sc.shape} and {x_cam.shape}")
    b, F, h, w, C = x_sc.shape
    if x_cam.shape[0] != b or x_cam.shape[2:] != (h, w, C):
        raise ShapeError(f"CAM feature {x_cam.shape} does not match skip {x_sc.shape}")
    Fc = x_cam.shape[1]

    xs = linear(group_norm_st(x_sc, groups), proj["P_in"])
    # one temporal sequence per (batch, row, col) position
    xs = xs.transpose(0, 2, 3, 1, 4).reshape(b * h * w, F, C)
    xc = x_cam.transpose(0, 2, 3, 1, 4).reshape(b * h * w, Fc, C)
    q = linear(xs, proj["P_Q"])
    k = linear(xc, proj["P_K"])
    v = linear(xc, proj["P_V"])
    attn, weights = multihead_attention(q, k, v, heads, return_weights=True)
    out = linear(attn, proj["P_out"]).reshape(b, h, w, F, C).transpose(0, 3, 1, 2, 4)
    y = x_sc + out
    y = y[0] if squeeze else y
    return (y, weights) if return_weights else y


@dataclass
class CamFeatures:
    """Trunk features of the conditioning frames plus the injection weights."""

    features: list[np.ndarray]
    proj: list[dict[str, np.ndarray]]
    groups: int
    heads: int

    def apply(self, level: int, x_sc: np.ndarray) -> np.ndarray:
        return inject_skip(x_sc, self.features[level], self.proj[level], self.groups, self.heads)


def encode_condition(cond_frames: np.ndarray, cam_weights: Params, ucfg: UNetConfig,
                     cam_cfg: CamConfig, context, t: int = 0, trace=None) -> CamFeatures:
    """Encode the conditioning frames once per chunk.

    The trunk runs on the clean frames at timestep ``t`` with the text
    context; the frame encoder's output is added after the trunk's first
    temporal attention.
    """
    expected = (cam_cfg.F_cond, ucfg.h, ucfg.w, ucfg.c)
    if np.shape(cond_frames) != expected:
        raise ShapeError(f"conditioning frames must be {expected}, got {np.shape(cond_frames)}")
    trunk = _trunk(cam_weights)
    tcfg = replace(ucfg, F=cam_cfg.F_cond, in_channels=None)
    ctxs = _layer_contexts(context, tcfg)
    fuse = frame_encoder(cond_frames, cam_weights)
    skips, _ = encode(cond_frames, time_embedding(t, trunk, tcfg), ctxs, trunk, tcfg, fuse=fuse, trace=trace)
    proj = [{name: cam_weights[f"inject{l}.{name}"] for name in ("P_in", "P_Q", "P_K", "P_V", "P_out")}
            for l in range(ucfg.levels)]
    return CamFeatures(skips, proj, ucfg.groups, ucfg.heads)


def condition_mask(cfg: CamConfig, frame_shape, mode: str = "inference",
                   rng: RngStream | None = None) -> np.ndarray:
    """Binary per-frame mask with exactly ``F - F_cond`` ones.

    Inference mode zeroes the first ``F_cond`` frames.  Training mode picks
    the ones uniformly at random (partial Fisher-Yates shuffle).
    """
    if mode == "inference":
        flags = np.r_[np.zeros(cfg.F_cond), np.ones(cfg.F - cfg.F_cond)]
    elif mode == "train":
        if rng is None:
            raise ValueError("training-mode masks need an RngStream")
        order = np.arange(cfg.F)
        for i in range(cfg.F - cfg.F_cond):
            j = i + int(rng.integers(cfg.F - i)[0])
            order[i], order[j] = order[j], order[i]
        flags = np.zeros(cfg.F)
        flags[order[: cfg.F - cfg.F_cond]] = 1.0
    else:
        raise ValueError(f"mask mode must be 'inference' or 'train', got {mode!r}")
    return np.broadcast_to(flags.reshape(-1, *([1] * len(frame_shape))), (cfg.F, *frame_shape)).copy()


def check_mask(M: np.ndarray, cfg: CamConfig):
    if M.shape[0] != cfg.F:
        raise ShapeError(f"mask has {M.shape[0]} frames, expected {cfg.F}")
    if not np.isin(M, (0.0, 1.0)).all():
        raise ValueError("mask must be binary")
    per_frame = M.reshape(cfg.F, -1)
    if not (per_frame == per_frame[:, :1]).all():
        raise ValueError("mask must be constant within each frame")
    if per_frame[:, 0].sum() != cfg.F - cfg.F_cond:
        raise ValueError(f"mask must select exactly F - F_cond = {cfg.F - cfg.F_cond} frames, "
                         f"got {int(per_frame[:, 0].sum())}")


def init_add_cond_weights(unet_weights: Params, ucfg: UNetConfig, seed: int = 0) -> Params:
    """ControlNet-style branch: encoder copy, masked-video stem, zero 1x1 convs per skip."""
    rng = RngStream(seed).fork("add_cond")
    p: Params = {}
    _econd_params(p, rng, "econd", 2 * ucfg.c, ucfg.level_channels[0])
    _trunk_params(p, unet_weights, ucfg)
    for l, C in enumerate(ucfg.level_channels):
        p[f"zero{l}.w"] = np.zeros((1, 1, C, C))
        p[f"zero{l}.b"] = np.zeros(C)
    return p


def add_cond_inject(cond_input: np.ndarray, z_t: np.ndarray, t: int, context, weights: Params,
                    ucfg: UNetConfig, cam_cfg: CamConfig) -> list[np.ndarray]:
    """Skip residuals from ``concat([V * M, M])``; pass them as ``skip_residuals``."""
    c = ucfg.c
    if cond_input.shape != (cam_cfg.F, ucfg.h, ucfg.w, 2 * c):
        raise ShapeError(f"add-cond input must be ({cam_cfg.F}, {ucfg.h}, {ucfg.w}, {2 * c}), "
                         f"got {cond_input.shape}")
    check_mask(cond_input[..., c:], cam_cfg)
    trunk = _trunk(weights)
    tcfg = replace(ucfg, in_channels=None)
    fuse = frame_encoder(cond_input, weights)
    skips, _ = encode(z_t[..., :c], time_embedding(t, trunk, tcfg), _layer_contexts(context, tcfg),
                      trunk, tcfg, fuse=fuse)
    return [conv2d(s, weights[f"zero{l}.w"], weights[f"zero{l}.b"]) for l, s in enumerate(skips)]


def conc_cond_inject(z_t: np.ndarray, video: np.ndarray, M: np.ndarray) -> np.ndarray:
    """UNet input ``[z_t, video * M, M]`` concatenated along channels."""
    if not (z_t.shape == video.shape == M.shape):
        raise ShapeError(f"z_t {z_t.shape}, video {video.shape} and mask {M.shape} must agree")
    return np.concatenate([z_t, video * M, M], axis=-1)


def conc_cond_unet(unet_weights: Params, ucfg: UNetConfig, seed: int | None = None):
    """UNet weights/config whose first convolution accepts the concatenated input."""
    return widen_first_conv(unet_weights, ucfg, 2 * ucfg.c, seed)
