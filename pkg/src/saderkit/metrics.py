"""Image quality metrics: PSNR, SSIM, MAE, RMSE, SAM.

All metrics are computed in float64 on images in the evaluation space
([0, 1] unless data_range says otherwise). SSIM follows the classic
formulation: an 11x11 Gaussian window (sigma 1.5), constants K1=0.01 and
K2=0.03, evaluated on every position where the full window fits, then
averaged over positions and channels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

PSNR_INF = float("inf")


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target, data_range: float = 1.0) -> float:
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    pred, target = _check_pair(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return -10.0 * math.log10(mse / (data_range * data_range))


def mae_metric(pred, target) -> float:
    pred, target = _check_pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def rmse(pred, target) -> float:
    pred, target = _check_pair(pred, target)
    return float(math.sqrt(np.mean((pred - target) ** 2)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 2D Gaussian weights, shape [size, size]."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, kernel, c1, c2) -> float:
    win = kernel.shape[0]
    # Gaussian-weighted local moments over every fully contained window.
    wa = np.lib.stride_tricks.sliding_window_view(a, (win, win))
    wb = np.lib.stride_tricks.sliding_window_view(b, (win, win))
    mu_a = np.tensordot(wa, kernel, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(wb, kernel, axes=([2, 3], [0, 1]))
    e_aa = np.tensordot(wa * wa, kernel, axes=([2, 3], [0, 1]))
    e_bb = np.tensordot(wb * wb, kernel, axes=([2, 3], [0, 1]))
    e_ab = np.tensordot(wa * wb, kernel, axes=([2, 3], [0, 1]))
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(
    pred,
    target,
    data_range: float = 1.0,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    sigma: float = 1.5,
) -> float:
    """Mean local SSIM; channel-averaged for [C, H, W] inputs."""
    pred, target = _check_pair(pred, target)
    if pred.ndim == 2:
        pred = pred[None]
        target = target[None]
    if pred.ndim != 3:
        raise ConfigError(f"expected [H, W] or [C, H, W], got shape {pred.shape}")
    h, w = pred.shape[-2:]
    if h < window or w < window:
        raise ConfigError(f"image {h}x{w} smaller than SSIM window {window}")
    kernel = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = [_ssim_channel(pred[c], target[c], kernel, c1, c2) for c in range(pred.shape[0])]
    return float(np.mean(vals))


def sam(pred, target) -> float:
    """Mean spectral angle in degrees between per-pixel channel vectors."""
    pred, target = _check_pair(pred, target)
    if pred.ndim != 3 or pred.shape[0] < 2:
        raise ConfigError("SAM needs [C, H, W] input with C >= 2")
    p = pred.reshape(pred.shape[0], -1)
    t = target.reshape(target.shape[0], -1)
    np_norm = np.linalg.norm(p, axis=0)
    nt_norm = np.linalg.norm(t, axis=0)
    valid = (np_norm > 0) & (nt_norm > 0)
    if not valid.any():
        raise ConfigError("SAM undefined: all pixels have zero spectral norm")
    dot = np.sum(p[:, valid] * t[:, valid], axis=0)
    cosang = np.clip(dot / (np_norm[valid] * nt_norm[valid]), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosang)).mean())


@dataclass
class MetricReport:
    """Per-sample metric values plus their arithmetic-mean aggregates."""

    per_sample: dict = field(default_factory=dict)  # metric -> list of floats
    sample_ids: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.sample_ids)

    def aggregates(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.per_sample.items() if v}

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "aggregate": self.aggregates(),
            "per_sample": {
                "ids": self.sample_ids,
                **{k: list(v) for k, v in self.per_sample.items()},
            },
            "config": self.config,
        }

    def write_json(self, path: Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def write_csv(self, path: Path):
        names = sorted(self.per_sample)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id"] + names)
            for i, sid in enumerate(self.sample_ids):
                writer.writerow([sid] + [self.per_sample[n][i] for n in names])


def evaluate_pairs(pairs, data_range: float = 1.0, include_sam: bool | None = None) -> MetricReport:
    """Score (id, pred, target) triples with every metric.

    SAM is included when the images have at least two channels unless
    overridden; SSIM is skipped for images smaller than its window.
    """
    report = MetricReport(config={"data_range": data_range})
    for sid, pred, target in pairs:
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        use_sam = include_sam
        if use_sam is None:
            use_sam = pred.ndim == 3 and pred.shape[0] >= 2
        report.sample_ids.append(sid)
        report.per_sample.setdefault("psnr", []).append(psnr(pred, target, data_range))
        report.per_sample.setdefault("ssim", []).append(ssim(pred, target, data_range))
        report.per_sample.setdefault("mae", []).append(mae_metric(pred, target))
        report.per_sample.setdefault("rmse", []).append(rmse(pred, target))
        if use_sam:
            report.per_sample.setdefault("sam", []).append(sam(pred, target))
    return report
