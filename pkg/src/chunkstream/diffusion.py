"""Noise schedule, forward diffusion, DDIM sampling, SDEdit and guidance.

Timesteps are 1-based (``t = 1..T``) with the convention ``alpha_bar(0) = 1``
so that ``t_prev = 0`` denotes the clean signal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import RngStream

log = logging.getLogger(__name__)

EpsFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class Schedule:
    beta: np.ndarray
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t - 1])


@dataclass(frozen=True)
class GuidanceWeights:
    omega_text: float = 7.5
    omega_anchor: float = 7.5

    def __post_init__(self):
        if not (np.isfinite(self.omega_text) and np.isfinite(self.omega_anchor)):
            raise ValueError("guidance weights must be finite")


def make_schedule(T: int = 1000, beta0: float = 0.0085, betaT: float = 0.0120) -> Schedule:
    """Linear beta schedule over ``T`` steps, both endpoints included."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta0 <= betaT < 1.0):
        raise ValueError(f"need 0 < beta0 <= betaT < 1, got beta0={beta0}, betaT={betaT}")
    beta = np.array([beta0]) if T == 1 else np.linspace(beta0, betaT, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return Schedule(beta, alpha, alpha_bar)


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, s: Schedule) -> np.ndarray:
    """Sample of q(x_t | x_0) for the given noise: sqrt(abar) x0 + sqrt(1-abar) eps."""
    if not 1 <= t <= s.T:
        raise ValueError(f"timestep {t} outside [1, {s.T}]")
    if np.shape(x0) != np.shape(eps):
        raise ValueError(f"x0 {np.shape(x0)} and eps {np.shape(eps)} differ in shape")
    ab = s.abar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniform stride over [1, T], largest first (e.g. 1000, 980, ..., 20)."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    return [int(round(T - k * T / steps)) for k in range(steps)]


def sdedit_timesteps(Tprime: int, steps: int) -> list[int]:
    """``steps`` evenly spaced timesteps from ``Tprime`` down (exclusive of 0)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ts = [int(round(Tprime * (steps - k) / steps)) for k in range(steps)]
    out = []
    for t in ts:
        t = max(t, 1)
        if not out or t < out[-1]:
            out.append(t)
    return out


def ddim_sigma(s: Schedule, t: int, t_prev: int, eta: float) -> float:
    a, ap = s.abar(t), s.abar(t_prev)
    return eta * np.sqrt((1.0 - ap) / (1.0 - a)) * np.sqrt(1.0 - a / ap)


def ddim_step(x_t, eps_pred, t: int, t_prev: int, eta: float, s: Schedule,
              rng: RngStream | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """One DDIM update from ``t`` to ``t_prev``.

    The stochastic term uses ``noise`` when given (shared-noise refinement),
    otherwise a fresh draw from ``rng``.  No draw is made when sigma is 0.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    a, ap = s.abar(t), s.abar(t_prev)
    x0_hat = (x_t - np.sqrt(1.0 - a) * eps_pred) / np.sqrt(a)
    sigma = ddim_sigma(s, t, t_prev, eta)
    dir_var = 1.0 - ap - sigma**2
    if dir_var < 0.0:
        log.warning("ddim_step: sigma^2 exceeds 1 - abar_prev at t=%d; clamped to 0", t)
        dir_var = 0.0
    x_prev = np.sqrt(ap) * x0_hat + np.sqrt(dir_var) * eps_pred
    if sigma > 0.0:
        if noise is None:
            if rng is None:
                raise ValueError("eta > 0 requires an rng or explicit noise")
            noise = rng.normal(np.shape(x_t))
        x_prev = x_prev + sigma * noise
    return x_prev


def ddim_sample(eps_fn: EpsFn, x_T: np.ndarray, s: Schedule, timesteps: list[int],
                eta: float, rng: RngStream | None) -> np.ndarray:
    """Run DDIM over ``timesteps`` (descending), finishing at t = 0."""
    x = x_T
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        x = ddim_step(x, eps_fn(x, t), t, t_prev, eta, s, rng)
    return x


def cfg_epsilon(e_null, e_text, e_full, w: GuidanceWeights) -> np.ndarray:
    """Text-and-anchor classifier-free guidance.

    e_null = eps(tau_null, a_null), e_text = eps(tau, a_null),
    e_full = eps(tau, a).
    """
    if not (np.shape(e_null) == np.shape(e_text) == np.shape(e_full)):
        raise ValueError(
            f"guidance branches differ in shape: {np.shape(e_null)}, {np.shape(e_text)}, {np.shape(e_full)}"
        )
    return e_null + w.omega_text * (e_text - e_null) + w.omega_anchor * (e_full - e_text)


def sdedit_enhance(chunk: np.ndarray, Tprime: int, denoiser: EpsFn, s: Schedule,
                   rng: RngStream, steps: int, eta: float = 1.0,
                   noise: np.ndarray | None = None) -> np.ndarray:
    """Partially noise ``chunk`` to ``Tprime`` then DDIM-denoise it back to t = 0."""
    if not 1 <= Tprime < s.T:
        raise ValueError(f"Tprime must satisfy 1 <= Tprime < T={s.T}, got {Tprime}")
    if noise is None:
        noise = rng.normal(chunk.shape)
    x = forward_diffuse(chunk, Tprime, noise, s)
    return ddim_sample(denoiser, x, s, sdedit_timesteps(Tprime, steps), eta, rng)
