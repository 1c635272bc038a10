"""Closed-form noise predictors for Gaussian data laws.

For data ``x0 ~ N(mu, Sigma)`` and ``x_t = sqrt(a) x0 + sqrt(1-a) eps`` the
minimiser of ``E||eps - eps_theta(x_t)||^2`` is the posterior mean
``E[eps | x_t] = sqrt(1-a) (a Sigma + (1-a) I)^{-1} (x_t - sqrt(a) mu)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import Schedule


def oracle_epsilon(x_t, t: int, mu, sigma2: float, s: Schedule) -> np.ndarray:
    a = s.abar(t)
    return np.sqrt(1.0 - a) * (x_t - np.sqrt(a) * mu) / (a * sigma2 + 1.0 - a)


@dataclass(frozen=True)
class GaussianOracle:
    """Exact denoiser for per-element independent N(mu, sigma2) data."""

    mu: np.ndarray | float
    sigma2: float
    schedule: Schedule

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    def __call__(self, x_t, t, context=None, cam=None):
        return oracle_epsilon(x_t, t, self.mu, self.sigma2, self.schedule)


def _ar1_corr(n: int, rho: float) -> np.ndarray:
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :])


@dataclass(frozen=True)
class SmoothVideoOracle:
    """Exact denoiser for a separable Gaussian video prior.

    Data is ``x0 ~ N(mean, sigma2 * Kf (x) Ky (x) Kx (x) I_c)`` with AR(1)
    correlations ``rho**|i-j|`` along frames, rows and columns.  The prior
    couples frames, so a chunk's prediction for any frame depends on every
    other frame in that chunk, which is what makes chunk seams visible.
    """

    schedule: Schedule
    sigma2: float = 1.0
    mean: float = 0.0
    rho_frames: float = 0.9
    rho_space: float = 0.8

    def _basis(self, n: int, rho: float):
        lam, vec = np.linalg.eigh(_ar1_corr(n, rho))
        return np.clip(lam, 0.0, None), vec

    def __call__(self, x_t, t, context=None, cam=None):
        F, h, w, _ = x_t.shape
        a = self.schedule.abar(t)
        lf, uf = self._basis(F, self.rho_frames)
        ly, uy = self._basis(h, self.rho_space)
        lx, ux = self._basis(w, self.rho_space)
        lam = self.sigma2 * lf[:, None, None] * ly[None, :, None] * lx[None, None, :]
        gain = np.sqrt(1.0 - a) / (a * lam + 1.0 - a)
        r = x_t - np.sqrt(a) * self.mean
        z = np.einsum("fg,ghwc->fhwc", uf.T, r)
        z = np.einsum("yh,fhwc->fywc", uy.T, z)
        z = np.einsum("xw,fywc->fyxc", ux.T, z)
        z = z * gain[..., None]
        z = np.einsum("fg,ghwc->fhwc", uf, z)
        z = np.einsum("yh,fhwc->fywc", uy, z)
        return np.einsum("xw,fywc->fyxc", ux, z)
