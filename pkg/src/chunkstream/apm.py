"""Appearance preservation from an anchor frame (long-term memory).

The anchor frame is embedded as one image token, an MLP expands it to ``k``
tokens, and those tokens are concatenated with the text tokens.  A 1-D
convolution over the token axis then maps the result back to 77 tokens.
Each cross-attention layer receives ``silu(alpha_l) * x_mixed + x_text``
with a per-layer gate ``alpha_l`` that starts at zero.

Text and image encoders are deterministic stand-ins: seeded per-word vectors
and a seeded linear projection of the frame, both layer-normalised.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tensor import ShapeError, conv1d, layer_norm, linear, silu
from .videoldm import N_TEXT_TOKENS, Params

# small epsilon keeps the stub image token scale-invariant to ~1e-12
_STUB_LN_EPS = 1e-24


@dataclass(frozen=True)
class ApmConfig:
    k: int = 16
    d: int = 32
    text_tokens: int = N_TEXT_TOKENS
    mlp_hidden: int = 40
    conv_kernel: int = 3
    image_first: bool = True

    def __post_init__(self):
        if min(self.k, self.d, self.text_tokens, self.mlp_hidden) <= 0:
            raise ValueError("APM sizes must be positive")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv kernel size must be odd")

    @property
    def conv_in_tokens(self) -> int:
        return self.k + self.text_tokens


PAPER_SCALE = ApmConfig(d=1024, mlp_hidden=1280)


def stub_text_tokens(prompt: str, d: int = 32, seed: int = 0, n_tokens: int = N_TEXT_TOKENS) -> np.ndarray:
    """(n_tokens, d) text encoding: BOS, one vector per word, then padding.

    Word vectors come from a stream keyed by the lowercased word, so equal
    words always map to equal vectors.  Excess words are truncated.
    """
    root = RngStream(seed).fork("text")
    words = re.findall(r"[\w']+", prompt.lower())[: n_tokens - 1]
    rows = [root.fork("bos").normal(d)]
    rows += [root.fork("word", w).normal(d) for w in words]
    pad = root.fork("pad").normal(d)
    rows += [pad] * (n_tokens - len(rows))
    return layer_norm(np.stack(rows))


def stub_clip_image(anchor: np.ndarray, d: int = 32, seed: int = 0) -> np.ndarray:
    """(1, d) image token: seeded linear projection of the frame, layer-normalised."""
    flat = np.asarray(anchor, dtype=np.float64).reshape(1, -1)
    proj = RngStream(seed).fork("clip_image").normal((flat.shape[1], d)) / np.sqrt(flat.shape[1])
    return layer_norm(linear(flat, proj), eps=_STUB_LN_EPS)


def init_apm_weights(cfg: ApmConfig = ApmConfig(), n_layers: int = 5, seed: int = 0) -> Params:
    rng = RngStream(seed).fork("apm")
    d, hid = cfg.d, cfg.mlp_hidden
    return {
        "mlp.w1": rng.fork("mlp.w1").normal((d, hid)) / np.sqrt(d),
        "mlp.b1": np.zeros(hid),
        "mlp.w2": rng.fork("mlp.w2").normal((hid, cfg.k * d)) / np.sqrt(hid),
        "mlp.b2": np.zeros(cfg.k * d),
        "mix.w": rng.fork("mix.w").normal((cfg.text_tokens, cfg.conv_in_tokens, cfg.conv_kernel))
        / np.sqrt(cfg.conv_in_tokens * cfg.conv_kernel),
        "mix.b": np.zeros(cfg.text_tokens),
        "gates": np.zeros(n_layers),
    }


def expand_anchor_tokens(img_token: np.ndarray, p: Params, cfg: ApmConfig) -> np.ndarray:
    """One hidden-layer MLP mapping a (1, d) token to (k, d) tokens."""
    if img_token.shape != (1, cfg.d):
        raise ShapeError(f"image token must be (1, {cfg.d}), got {img_token.shape}")
    hidden = silu(linear(img_token, p["mlp.w1"], p["mlp.b1"]))
    return linear(hidden, p["mlp.w2"], p["mlp.b2"]).reshape(cfg.k, cfg.d)


def mix_tokens(img_tokens: np.ndarray, text_tokens: np.ndarray, p: Params, cfg: ApmConfig) -> np.ndarray:
    """Concatenate image and text tokens and convolve 93 tokens down to 77."""
    if img_tokens.shape != (cfg.k, cfg.d) or text_tokens.shape != (cfg.text_tokens, cfg.d):
        raise ShapeError(f"expected image ({cfg.k}, {cfg.d}) and text ({cfg.text_tokens}, {cfg.d}) tokens, "
                         f"got {img_tokens.shape} and {text_tokens.shape}")
    parts = [img_tokens, text_tokens] if cfg.image_first else [text_tokens, img_tokens]
    return conv1d(np.concatenate(parts, axis=0), p["mix.w"], p["mix.b"])


def blend_context(x_mixed: np.ndarray, x_text: np.ndarray, alpha: float) -> np.ndarray:
    if x_mixed.shape != x_text.shape:
        raise ShapeError(f"mixed {x_mixed.shape} and text {x_text.shape} tokens differ in shape")
    return float(silu(np.array(alpha))) * x_mixed + x_text


def anchor_contexts(anchor: np.ndarray | None, text_tokens: np.ndarray, p: Params,
                    cfg: ApmConfig, clip_seed: int = 0) -> list[np.ndarray]:
    """Per-cross-attention-layer contexts.  ``anchor=None`` is the null anchor (zero image token)."""
    if anchor is None:
        img = np.zeros((1, cfg.d))
    else:
        img = stub_clip_image(anchor, cfg.d, clip_seed)
    x_mixed = mix_tokens(expand_anchor_tokens(img, p, cfg), text_tokens, p, cfg)
    return [blend_context(x_mixed, text_tokens, a) for a in p["gates"]]


def select_anchor(first_chunk: np.ndarray, mode: str = "inference", rng: RngStream | None = None,
                  pool: int = 16) -> int:
    """Anchor frame index: 0 at inference, uniform over the first ``pool`` frames in training."""
    if mode == "inference":
        return 0
    if mode == "train":
        if rng is None:
            raise ValueError("training-mode anchor selection needs an RngStream")
        return int(rng.integers(min(pool, len(first_chunk)))[0])
    raise ValueError(f"anchor mode must be 'inference' or 'train', got {mode!r}")
