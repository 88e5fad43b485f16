"""Cloud-aware training loss.

From the target y and the per-frame cloudy observations the module derives

* a thickness weight map  m_a in [0, 1]^(H x W)  emphasizing thick clouds,
* a binary cloud-free mask  m_ua in {0, 1}^(H x W)  protecting reliable pixels,

via the transparency model  observed = (1 - a) * ground + a * cloud_radiance,
inverted as  a = |y - x| / (cloud_radiance - y)  with a guarded denominator.
Per-frame transparency estimates are min-max normalized spatially and
averaged over time. The total objective is

    w_t * (lc * L_cloud + lu * L_uncloud + lb * L_brightness)

where L_cloud / L_uncloud are masked squared errors and L_brightness is a
squared YUV-space difference (RGB only; it is dropped with a notice for any
other channel count). All functions operate on torch tensors and are
differentiable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)

_YUV = None


def _yuv_matrix(dtype, device):
    # BT.601: Y = 0.299 R + 0.587 G + 0.114 B; U = 0.492 (B - Y); V = 0.877 (R - Y)
    wr, wg, wb = 0.299, 0.587, 0.114
    m = [
        [wr, wg, wb],
        [0.492 * (-wr), 0.492 * (-wg), 0.492 * (1.0 - wb)],
        [0.877 * (1.0 - wr), 0.877 * (-wg), 0.877 * (-wb)],
    ]
    return torch.tensor(m, dtype=dtype, device=device)


@dataclass(frozen=True)
class LossWeights:
    lambda_cloud: float = 3.0
    lambda_uncloud: float = 1.0
    lambda_brightness: float = 2.0

    def __post_init__(self):
        if min(self.lambda_cloud, self.lambda_uncloud, self.lambda_brightness) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.lambda_cloud == self.lambda_uncloud == self.lambda_brightness == 0:
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class CloudMasks:
    m_a: torch.Tensor  # [H, W] thickness weights in [0, 1]
    m_ua: torch.Tensor  # [H, W] binary cloud-free mask
    v_d: torch.Tensor  # [T, C, H, W] absolute differences
    alpha_est: torch.Tensor  # [T, H, W] estimated transparency


def diff_map(y: torch.Tensor, x_mu: torch.Tensor) -> torch.Tensor:
    """Per-frame absolute difference |y - x_mu|, broadcasting y over frames."""
    if x_mu.dim() != y.dim() + 1 or x_mu.shape[1:] != y.shape:
        raise ConfigError(
            f"expected x_mu [T, *y.shape]; got {tuple(x_mu.shape)} vs y {tuple(y.shape)}"
        )
    return (y.unsqueeze(0) - x_mu).abs()


def estimate_alpha(
    v_d: torch.Tensor,
    y: torch.Tensor,
    cloud_radiance: float = 1.0,
    delta: float = 1e-3,
) -> torch.Tensor:
    """Invert the transparency model: a = v_d / max(cloud_radiance - y, delta).

    Channel-averaged to [T, H, W] and clamped to [0, 1].
    """
    denom = (cloud_radiance - y).clamp_min(delta)
    alpha = (v_d / denom.unsqueeze(0)).clamp(0.0, 1.0)
    return alpha.mean(dim=1)


def build_masks(alpha_est: torch.Tensor, tau: float = 0.05) -> tuple[torch.Tensor, torch.Tensor]:
    """Thickness weights and binary cloud-free mask from [T, H, W] estimates.

    Each frame is min-max normalized over space (constant frames map to zero),
    then frames are averaged; the binary mask marks pixels at or below tau.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigError("tau must lie in (0, 1)")
    if alpha_est.dim() != 3:
        raise ConfigError(f"alpha_est must be [T, H, W], got {tuple(alpha_est.shape)}")
    t = alpha_est.shape[0]
    frames = []
    for k in range(t):
        a = alpha_est[k]
        lo, hi = a.min(), a.max()
        if hi > lo:
            frames.append((a - lo) / (hi - lo))
        else:
            frames.append(torch.zeros_like(a))
    m_a = torch.stack(frames).mean(dim=0)
    m_ua = (m_a <= tau).to(alpha_est.dtype)
    return m_a, m_ua


def compute_masks(
    y: torch.Tensor,
    x_mu: torch.Tensor,
    cloud_radiance: float = 1.0,
    tau: float = 0.05,
    delta: float = 1e-3,
) -> CloudMasks:
    """Full mask pipeline from (target, per-frame observations)."""
    v_d = diff_map(y, x_mu)
    alpha_est = estimate_alpha(v_d, y, cloud_radiance, delta)
    m_a, m_ua = build_masks(alpha_est, tau)
    return CloudMasks(m_a=m_a, m_ua=m_ua, v_d=v_d, alpha_est=alpha_est)


def rgb_to_yuv(img: torch.Tensor) -> torch.Tensor:
    """Linear BT.601 RGB -> YUV on the channel axis of [..., 3, H, W]."""
    if img.dim() < 3 or img.shape[-3] != 3:
        raise ConfigError(f"rgb_to_yuv needs a 3-channel axis, got {tuple(img.shape)}")
    m = _yuv_matrix(img.dtype, img.device)
    return torch.einsum("oc,...chw->...ohw", m, img)


_warned_brightness = False


def total_loss(
    y_hat: torch.Tensor,
    y: torch.Tensor,
    masks: CloudMasks,
    weights: LossWeights = LossWeights(),
    w_t: float = 1.0,
    plain_mse: bool = False,
):
    """Weighted cloud-aware objective; returns (total, per-term breakdown).

    y_hat and y must share a shape of [..., C, H, W]; the masks broadcast over
    leading dimensions. With plain_mse the masked terms are replaced by a
    single unweighted squared error (the brightness term is dropped too).
    """
    global _warned_brightness
    if y_hat.shape != y.shape:
        raise ConfigError(f"shape mismatch: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    if not torch.isfinite(y_hat).all() or not torch.isfinite(y).all():
        raise NumericError("non-finite values in loss inputs")

    sq = (y_hat - y) ** 2
    if plain_mse:
        mse = sq.mean()
        total = w_t * mse
        return total, {"cloud": mse.detach(), "uncloud": torch.zeros_like(mse),
                       "brightness": torch.zeros_like(mse), "total": total.detach()}

    l_cloud = (masks.m_a * sq).mean()
    l_uncloud = (masks.m_ua * sq).mean()

    lb = weights.lambda_brightness
    if lb > 0 and y.shape[-3] != 3:
        if not _warned_brightness:
            log.info("brightness term disabled: needs 3 channels, got %d", y.shape[-3])
            _warned_brightness = True
        lb = 0.0
    if lb > 0:
        dyuv = rgb_to_yuv(y_hat) - rgb_to_yuv(y)
        l_brightness = (dyuv**2).sum(dim=-3).mean()
    else:
        l_brightness = torch.zeros((), dtype=y.dtype, device=y.device)

    total = w_t * (
        weights.lambda_cloud * l_cloud
        + weights.lambda_uncloud * l_uncloud
        + lb * l_brightness
    )
    if not torch.isfinite(total):
        raise NumericError("non-finite loss")
    breakdown = {
        "cloud": l_cloud.detach(),
        "uncloud": l_uncloud.detach(),
        "brightness": l_brightness.detach(),
        "total": total.detach(),
    }
    return total, breakdown
