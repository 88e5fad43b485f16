"""Deterministic resampling sampler.

Sampling integrates the reverse-time trajectory with plain Euler steps over
the discretized noise levels. At each level the current state is denoised
once; optional resampling rounds then regenerate candidate denoised images
by re-injecting the mean and fresh noise at the same level, and fuse them
pixel-wise: among the pixels whose (channel-averaged) deviation from the
observations is in the top fraction, a pixel adopts the new candidate
whenever the new candidate is closer to a structural guide image. The Euler
step continues from the last re-noised state, so with zero resampling rounds
the procedure reduces exactly to the plain Euler trajectory.

Noise draws come from counter-based streams keyed by (seed, level, round,
frame), making the whole procedure a pure function of (denoiser, inputs,
config).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConfigError
from .schedule import Schedule

GUIDE_KINDS = ("none", "mean", "conv", "mae")


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 4
    n_resample: int = 1
    top_fraction: Optional[float] = None  # resolved from the dataset manifest when None
    guide: str = "mae"
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.n_resample < 0:
            raise ConfigError("n_resample must be >= 0")
        if self.top_fraction is not None and not 0.0 <= self.top_fraction <= 1.0:
            raise ConfigError("top_fraction must lie in [0, 1]")
        if self.guide not in GUIDE_KINDS:
            raise ConfigError(f"guide must be one of {GUIDE_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_noise_like(x: torch.Tensor, *key_parts: int) -> torch.Tensor:
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key_parts])
    rng = np.random.Generator(np.random.Philox(ss))
    eps = rng.standard_normal(tuple(x.shape))
    return torch.from_numpy(eps).to(dtype=x.dtype, device=x.device)


def euler_step(x_cur: torch.Tensor, x0_hat: torch.Tensor, sigma_i: float, sigma_next: float):
    """One reverse-time Euler update from level sigma_i to sigma_next."""
    if sigma_i <= 0:
        raise ConfigError("euler_step requires sigma_i > 0")
    d = (x_cur - x0_hat) / sigma_i
    return x_cur + (sigma_next - sigma_i) * d


def reinject(
    x0_hat: torch.Tensor,
    mu: torch.Tensor,
    sigma_i: float,
    alpha: float,
    eps: torch.Tensor,
):
    """Mean-inject then re-noise a denoised candidate at the current level.

    Returns (x_mu_i, x_d_i): the mean-injected image and its noised version
    x_mu_i + sigma_i * eps for unit-Gaussian eps.
    """
    if sigma_i <= 0:
        raise ConfigError("reinject requires sigma_i > 0")
    x_mu_i = x0_hat + (alpha * sigma_i) * mu
    x_d_i = x_mu_i + sigma_i * eps
    return x_mu_i, x_d_i


def select_unstable(x_prev: torch.Tensor, mu: torch.Tensor, top_fraction: float) -> torch.Tensor:
    """Boolean mask of the ceil(top_fraction * P) highest-deviation pixels.

    Deviation is |x_prev - mu| averaged over channels; P counts all remaining
    pixels (frames included). Ties break toward the lower flat index.
    """
    if not 0.0 <= top_fraction <= 1.0:
        raise ConfigError("top_fraction must lie in [0, 1]")
    dev = (x_prev - mu).abs().mean(dim=-3)
    flat = dev.reshape(-1)
    p = flat.numel()
    k = math.ceil(top_fraction * p)
    mask = torch.zeros(p, dtype=torch.bool, device=x_prev.device)
    if k > 0:
        order = torch.argsort(-flat, stable=True)
        mask[order[:k]] = True
    return mask.view(dev.shape)


def fuse(
    cand_prev: torch.Tensor,
    cand_new: torch.Tensor,
    guide_img: torch.Tensor,
    sel: torch.Tensor,
):
    """Pixel-wise candidate fusion against a guide on the selected set.

    A selected pixel switches to the new candidate when the new candidate is
    strictly closer to the guide (channel-averaged absolute difference); all
    other pixels keep the previous candidate. Returns (fused, replace_mask).
    """
    if cand_prev.shape != cand_new.shape:
        raise ConfigError(
            f"candidate shapes differ: {tuple(cand_prev.shape)} vs {tuple(cand_new.shape)}"
        )
    d_prev = (cand_prev - guide_img).abs().mean(dim=-3)
    d_new = (cand_new - guide_img).abs().mean(dim=-3)
    m = sel & (d_new < d_prev)
    mc = m.unsqueeze(-3)
    fused = torch.where(mc, cand_new, cand_prev)
    return fused, m


# ---------------------------------------------------------------------------
# guides


def _gaussian_kernel2d(size: int, sigma: float, dtype, device) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(r**2) / (2.0 * sigma * sigma))
    k = torch.outer(g, g)
    return k / k.sum()


def guide_mean(x_mu_i: torch.Tensor) -> torch.Tensor:
    """Temporal mean of the injected frames, broadcast back over frames."""
    return x_mu_i.mean(dim=0, keepdim=True).expand_as(x_mu_i)


def guide_conv(x_mu_i: torch.Tensor, size: int = 5, sigma: float = 1.5) -> torch.Tensor:
    """Gaussian blur (reflect padding) of each frame and channel."""
    t, c, h, w = x_mu_i.shape
    k = _gaussian_kernel2d(size, sigma, x_mu_i.dtype, x_mu_i.device)
    weight = k.expand(c, 1, size, size)
    pad = size // 2
    padded = torch.nn.functional.pad(x_mu_i, (pad, pad, pad, pad), mode="reflect")
    return torch.nn.functional.conv2d(padded, weight, groups=c)


def guide_mae(x_mu_i: torch.Tensor, prior) -> torch.Tensor:
    """Frozen-prior reconstruction, mapped through the prior's input range.

    Each frame is min-max mapped to [0, 1], reconstructed, and mapped back;
    constant frames pass through unchanged.
    """
    if prior is None:
        raise ConfigError("mae guide requested but no prior is loaded")
    out = torch.empty_like(x_mu_i)
    for t in range(x_mu_i.shape[0]):
        frame = x_mu_i[t]
        lo, hi = frame.min(), frame.max()
        if hi > lo:
            unit = (frame - lo) / (hi - lo)
            rec = prior.reconstruct(unit.unsqueeze(0))[0]
            out[t] = rec * (hi - lo) + lo
        else:
            out[t] = frame
    return out


def make_guide(kind: str, prior=None) -> Optional[Callable]:
    if kind == "none":
        return None
    if kind == "mean":
        return guide_mean
    if kind == "conv":
        return guide_conv
    if kind == "mae":
        if prior is None:
            raise ConfigError("mae guide requested but no prior is loaded")
        return lambda x: guide_mae(x, prior)
    raise ConfigError(f"unknown guide kind: {kind}")


# ---------------------------------------------------------------------------
# full procedure


def sample(
    denoiser: Callable[[torch.Tensor, float], torch.Tensor],
    mu: torch.Tensor,
    sched: Schedule,
    cfg: SamplerConfig,
    guide_fn: Optional[Callable] = None,
    trace: Optional[dict] = None,
) -> torch.Tensor:
    """Run the full sampler for one scene.

    denoiser(x, sigma) must return the clean-frame estimate for a [T, C, H, W]
    state; mu holds the per-frame observations in the same space. Returns the
    temporal mean of the final frames, shape [C, H, W]. Pass a dict as trace
    to collect per-level fusion statistics and the denoiser call count.
    """
    if mu.dim() != 4:
        raise ConfigError(f"mu must be [T, C, H, W], got {tuple(mu.shape)}")
    if cfg.n_resample > 0 and cfg.guide != "none" and guide_fn is None:
        raise ConfigError(f"sampler guide '{cfg.guide}' requires a guide function")
    th = cfg.top_fraction
    if cfg.n_resample > 0 and cfg.guide != "none" and th is None:
        raise ConfigError("top_fraction is unset; resolve it from the manifest or a flag")

    levels = sched.sigma_levels()
    eps0 = _unit_noise_like(mu, cfg.seed)
    x = (sched.alpha * levels[0]) * mu + levels[0] * eps0

    calls = 0
    fusion_log = []
    for i in range(cfg.n_steps):
        s_i = float(levels[i])
        s_next = float(levels[i + 1])
        x_f = denoiser(x, s_i)
        calls += 1
        x_d = x
        for j in range(1, cfg.n_resample + 1):
            eps = torch.stack(
                [
                    _unit_noise_like(mu[t], cfg.seed, i, j, t)
                    for t in range(mu.shape[0])
                ]
            )
            x_mu_i, x_d = reinject(x_f, mu, s_i, sched.alpha, eps)
            x_new = denoiser(x_d, s_i)
            calls += 1
            if cfg.guide == "none":
                x_f = x_new
                fusion_log.append(
                    {"level": i, "round": j, "selected": 0, "replaced": 0}
                )
            else:
                g = guide_fn(x_mu_i)
                sel = select_unstable(x_f, mu, th)
                x_f, m = fuse(x_f, x_new, g, sel)
                fusion_log.append(
                    {
                        "level": i,
                        "round": j,
                        "selected": int(sel.sum()),
                        "replaced": int(m.sum()),
                    }
                )
        x = euler_step(x_d, x_f, s_i, s_next)

    if trace is not None:
        trace["denoiser_calls"] = calls
        trace["fusion"] = fusion_log
        trace["levels"] = [float(v) for v in levels]
    return x.mean(dim=0)
