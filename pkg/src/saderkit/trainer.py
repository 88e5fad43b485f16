"""Training loop, evaluation helpers, baselines, and ablation orchestration.

Samples are held in memory at desk scale. Stored reflectance values in [0, 1]
are mapped to [-1, 1] for the network (auxiliary channels included) and
predictions are mapped back to [0, 1] before any metric is computed. Cloud
masks depend only on (target, observations) and are computed once per sample
and cached by id.

The optimizer is a momentum-free adaptive first-order method (RMSprop) with a
fixed learning rate; training is single-writer and fully determined by
(config, seed) on one device.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import cloudloss, dresample, metrics, scenegen
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .mtcdn import MTCDN, MTCDNConfig, denoise
from .schedule import Schedule


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    lambda_cloud: float = 3.0
    lambda_uncloud: float = 1.0
    lambda_brightness: float = 2.0
    tau: float = 0.05
    cloud_radiance: float = 1.0
    plain_mse: bool = False
    disable_cloudfree: bool = False
    disable_brightness: bool = False
    disable_tfblock: bool = False
    disable_hablock: bool = False
    manifest_path: str = ""
    schedule: Schedule = field(default_factory=Schedule)
    model: MTCDNConfig = field(default_factory=MTCDNConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def loss_weights(self) -> cloudloss.LossWeights:
        return cloudloss.LossWeights(
            lambda_cloud=self.lambda_cloud,
            lambda_uncloud=0.0 if self.disable_cloudfree else self.lambda_uncloud,
            lambda_brightness=0.0 if self.disable_brightness else self.lambda_brightness,
        )

    def model_config(self) -> MTCDNConfig:
        return replace(
            self.model,
            use_tfblock=self.model.use_tfblock and not self.disable_tfblock,
            use_hablock=self.model.use_hablock and not self.disable_hablock,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class PreparedSample:
    """One sample with tensors in training space plus cached cloud masks."""

    sample_id: str
    y: torch.Tensor  # [C, H, W] in [-1, 1]
    mu: torch.Tensor  # [T, C, H, W] in [-1, 1]
    aux: Optional[torch.Tensor]  # [T, Ca, H, W] in [-1, 1]
    masks: cloudloss.CloudMasks
    y01: np.ndarray
    x01: np.ndarray
    alpha_true: Optional[np.ndarray]
    coverage: np.ndarray


def prepare_samples(
    samples: dict, tau: float = 0.05, cloud_radiance: float = 1.0
) -> list[PreparedSample]:
    out = []
    for sid, s in samples.items():
        y01 = torch.from_numpy(s.y)
        x01 = torch.from_numpy(s.x)
        masks = cloudloss.compute_masks(y01, x01, cloud_radiance, tau)
        aux = None
        if s.aux is not None:
            aux = torch.from_numpy(scenegen.to_training_space(s.aux))
        out.append(
            PreparedSample(
                sample_id=sid,
                y=torch.from_numpy(scenegen.to_training_space(s.y)),
                mu=torch.from_numpy(scenegen.to_training_space(s.x)),
                aux=aux,
                masks=masks,
                y01=s.y,
                x01=s.x,
                alpha_true=s.alpha_true,
                coverage=s.coverage,
            )
        )
    return out


def train_step(
    batch: list[PreparedSample],
    model: MTCDN,
    sched: Schedule,
    cfg: TrainConfig,
    opt: torch.optim.Optimizer,
    rng: np.random.Generator,
) -> dict:
    """One optimizer update; returns the averaged loss breakdown."""
    weights = cfg.loss_weights()
    y = torch.stack([s.y for s in batch])
    mu = torch.stack([s.mu for s in batch])
    aux = torch.stack([s.aux for s in batch]) if batch[0].aux is not None else None
    b, t = mu.shape[0], mu.shape[1]

    sigmas = sched.sample_sigma(rng, b)
    eps = torch.from_numpy(
        rng.standard_normal(tuple(mu.shape)).astype(np.float32)
    )
    sig = torch.from_numpy(sigmas.astype(np.float32)).reshape(b, 1, 1, 1, 1)
    x = y[:, None] + sched.alpha * sig * mu + sig * eps

    ids = [s.sample_id for s in batch]
    try:
        x0_hat = denoise(model, sched, x, sigmas.astype(np.float32), mu, aux)

        totals = []
        terms = {"cloud": 0.0, "uncloud": 0.0, "brightness": 0.0}
        for i, s in enumerate(batch):
            w_t = sched.loss_weight(float(sigmas[i]))
            target = s.y.unsqueeze(0).expand(t, -1, -1, -1)
            total_i, parts = cloudloss.total_loss(
                x0_hat[i], target, s.masks, weights, w_t, plain_mse=cfg.plain_mse
            )
            totals.append(total_i)
            for k in terms:
                terms[k] += float(parts[k])
    except NumericError as exc:
        raise NumericError(f"{exc} (batch {ids})") from None
    loss = torch.stack(totals).mean()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss on batch {ids}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {
        "sigma": float(np.mean(sigmas)),
        "cloud": terms["cloud"] / b,
        "uncloud": terms["uncloud"] / b,
        "brightness": terms["brightness"] / b,
        "total": float(loss.detach()),
    }


def train_model(
    prepared: list[PreparedSample],
    cfg: TrainConfig,
    run_dir: Optional[Path] = None,
    log_every: int = 0,
) -> tuple[MTCDN, list[dict]]:
    """Full training loop; returns the model and the per-step loss history."""
    if not prepared:
        raise DataError("no training samples")
    sched = cfg.schedule
    torch.manual_seed(cfg.seed)
    model = MTCDN(cfg.model_config())
    opt = torch.optim.RMSprop(model.parameters(), lr=cfg.lr)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0x7A])))

    log_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "train_log.jsonl", "w")

    history = []
    step = 0
    n = len(prepared)
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = [prepared[j] for j in order[start : start + cfg.batch_size]]
                record = train_step(batch, model, sched, cfg, opt, rng)
                record["step"] = step
                history.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                if log_every and step % log_every == 0:
                    print(
                        f"step {step:5d} sigma {record['sigma']:.3f} "
                        f"total {record['total']:.5f}"
                    )
                step += 1
            if run_dir is not None:
                save_checkpoint(
                    run_dir / f"ckpt-{epoch}",
                    kind="mtcdn",
                    config=cfg.model_config().to_dict(),
                    state_dict=model.state_dict(),
                    schedule=sched.to_dict(),
                    extra={"epoch": epoch, "train_config": cfg_to_jsonable(cfg)},
                )
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, history


def cfg_to_jsonable(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return d


def load_model(path) -> tuple[MTCDN, Schedule]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "mtcdn":
        raise DataError(f"{path}: expected an 'mtcdn' checkpoint, found {ckpt.kind!r}")
    model = MTCDN(MTCDNConfig.from_dict(ckpt.config))
    model.load_state_dict(ckpt.state)
    model.eval()
    if ckpt.schedule is None:
        raise DataError(f"{path}: checkpoint is missing its schedule snapshot")
    return model, Schedule.from_dict(ckpt.schedule)


def make_denoiser(
    model: MTCDN, sched: Schedule, mu: torch.Tensor, aux: Optional[torch.Tensor]
) -> Callable[[torch.Tensor, float], torch.Tensor]:
    """Per-scene denoiser closure with the conditional features precomputed."""
    model.eval()
    mu_b = mu.unsqueeze(0)
    aux_b = aux.unsqueeze(0) if aux is not None else None
    with torch.no_grad():
        cond = model.encode_condition(mu_b, aux_b)

    def fn(x: torch.Tensor, sigma: float) -> torch.Tensor:
        with torch.no_grad():
            return denoise(model, sched, x.unsqueeze(0), sigma, mu_b, aux_b, cond)[0]

    return fn


def sample_scene(
    model: MTCDN,
    sched: Schedule,
    prep: PreparedSample,
    sampler_cfg: dresample.SamplerConfig,
    guide_fn=None,
    trace: Optional[dict] = None,
) -> np.ndarray:
    """Sample one scene and return the [0, 1]-space prediction [C, H, W]."""
    fn = make_denoiser(model, sched, prep.mu, prep.aux)
    out = dresample.sample(fn, prep.mu, sched, sampler_cfg, guide_fn, trace)
    pred = scenegen.from_training_space(out.numpy())
    return np.clip(pred, 0.0, 1.0).astype(np.float32)


def baseline_temporal_mean(x01: np.ndarray) -> np.ndarray:
    return x01.mean(axis=0)


def baseline_least_cloudy(x01: np.ndarray, coverage: np.ndarray) -> np.ndarray:
    return x01[int(np.argmin(coverage))]


def cloud_region_psnr(pred: np.ndarray, target: np.ndarray, alpha_true: np.ndarray) -> float:
    """PSNR restricted to the union cloud region (any frame with alpha > 0)."""
    region = (alpha_true > 0).any(axis=0)
    if not region.any():
        raise DataError("no cloud region in sample")
    diff = (pred - target)[:, region]
    mse = float(np.mean(diff.astype(np.float64) ** 2))
    if mse == 0:
        return metrics.PSNR_INF
    return -10.0 * math.log10(mse)


def evaluate_model(
    model: MTCDN,
    sched: Schedule,
    prepared: list[PreparedSample],
    sampler_cfg: dresample.SamplerConfig,
    guide_fn=None,
) -> metrics.MetricReport:
    pairs = []
    for prep in prepared:
        pred = sample_scene(model, sched, prep, sampler_cfg, guide_fn)
        pairs.append((prep.sample_id, pred, prep.y01))
    report = metrics.evaluate_pairs(pairs)
    report.config["sampler"] = sampler_cfg.to_dict()
    return report


def run_ablation(
    variants: list[tuple[str, TrainConfig]],
    train_prepared: list[PreparedSample],
    eval_prepared: list[PreparedSample],
    sampler_cfg: dresample.SamplerConfig,
    guide_fn=None,
) -> list[dict]:
    """Train and evaluate each variant; failures isolate to their own row."""
    rows = []
    for name, cfg in variants:
        t0 = time.time()
        try:
            prepared = train_prepared
            if (cfg.tau, cfg.cloud_radiance) != (0.05, 1.0):
                raw = {p.sample_id: _unprepare(p) for p in train_prepared}
                prepared = prepare_samples(raw, cfg.tau, cfg.cloud_radiance)
            model, _ = train_model(prepared, cfg)
            report = evaluate_model(model, cfg.schedule, eval_prepared, sampler_cfg, guide_fn)
            row = {"name": name, **report.aggregates(), "seconds": time.time() - t0}
        except Exception as exc:  # isolate variant failures
            row = {"name": name, "error": f"{type(exc).__name__}: {exc}"}
        rows.append(row)
    return rows


def _unprepare(p: PreparedSample) -> scenegen.MultiTemporalSample:
    aux01 = None
    if p.aux is not None:
        aux01 = scenegen.from_training_space(p.aux.numpy())
    return scenegen.MultiTemporalSample(
        x=p.x01,
        y=p.y01,
        aux=aux01,
        alpha_true=p.alpha_true,
        brightness_gain=np.ones(p.x01.shape[0]),
        coverage=p.coverage,
    )


def format_table(rows: list[dict]) -> str:
    """Plain-text table for ablation results."""
    if not rows:
        return "(no rows)"
    cols = ["name"]
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    widths = {c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for row in rows:
        lines.append("  ".join(_fmt(row.get(c)).ljust(widths[c]) for c in cols))
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
