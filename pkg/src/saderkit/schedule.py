"""Noise-level schedule and forward perturbation kernel.

The diffusion state for a clean image ``y`` with per-frame cloudy mean ``mu``
at noise level ``sigma`` is

    x = y + alpha * sigma * mu + sigma * eps,      eps ~ N(0, I)

so the mean contribution decays together with the noise as sigma -> 0.
``alpha`` is the mean response rate; ``sigma_data`` is the preconditioning
constant used for loss weighting and denoiser scaling.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Schedule:
    """Discretized noise levels sigma_0 > sigma_1 > ... > sigma_N = 0.

    Levels follow a rho-warped geometric interpolation between sigma_max and
    sigma_min, with an explicit terminal level of exactly zero.
    """

    sigma_max: float = 10.0
    sigma_min: float = 0.01
    n_steps: int = 5
    rho: float = 7.0
    alpha: float = 0.1
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.sigma_max <= 0 or self.sigma_min <= 0:
            raise ConfigError("sigma_max and sigma_min must be positive")
        if self.sigma_min > self.sigma_max:
            raise ConfigError("sigma_min must not exceed sigma_max")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.sigma_data <= 0:
            raise ConfigError("sigma_data must be positive")

    def sigma_at(self, i: int) -> float:
        """Noise level at step index i, 0 <= i <= n_steps; sigma(n_steps) = 0."""
        n = self.n_steps
        if not 0 <= i <= n:
            raise ConfigError(f"step index {i} out of range [0, {n}]")
        if i == n:
            return 0.0
        if n == 1 or i == 0:
            return float(self.sigma_max)
        inv = 1.0 / self.rho
        t = i / (n - 1)
        return float((self.sigma_max**inv + t * (self.sigma_min**inv - self.sigma_max**inv)) ** self.rho)

    def sigma_levels(self) -> np.ndarray:
        return np.array([self.sigma_at(i) for i in range(self.n_steps + 1)], dtype=np.float64)

    def forward_perturb(self, y, mu, sigma: float, eps):
        """x = y + alpha*sigma*mu + sigma*eps. Works on numpy arrays or torch tensors."""
        if mu.shape != y.shape or eps.shape != y.shape:
            raise ConfigError(
                f"shape mismatch: y {tuple(y.shape)}, mu {tuple(mu.shape)}, eps {tuple(eps.shape)}"
            )
        if sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        return y + (self.alpha * sigma) * mu + sigma * eps

    def init_sample(self, mu, rng: np.random.Generator):
        """Top-level sample alpha*sigma_0*mu + sigma_0*eps, eps ~ N(0, I) from rng."""
        s0 = self.sigma_at(0)
        eps = rng.standard_normal(tuple(mu.shape))
        if hasattr(mu, "numpy"):  # torch tensor
            import torch

            eps = torch.from_numpy(eps).to(mu.dtype)
        else:
            eps = eps.astype(np.asarray(mu).dtype, copy=False)
        return (self.alpha * s0) * mu + s0 * eps

    def loss_weight(self, sigma: float) -> float:
        """Effective training weight (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
        if sigma <= 0:
            raise ConfigError("loss weight undefined at sigma <= 0")
        sd = self.sigma_data
        return (sigma * sigma + sd * sd) / (sigma * sigma * sd * sd)

    def sample_sigma(self, rng: np.random.Generator, size=None):
        """Training-time noise levels, log-uniform on [sigma_min, sigma_max]."""
        u = rng.uniform(math.log(self.sigma_min), math.log(self.sigma_max), size=size)
        return np.exp(u)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(**d)
