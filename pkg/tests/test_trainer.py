import json

import numpy as np
import pytest
import torch

from saderkit import cloudloss as cl
from saderkit import dresample as dr
from saderkit import scenegen as sg
from saderkit import trainer as tr
from saderkit.errors import NumericError
from saderkit.mtcdn import MTCDNConfig
from saderkit.schedule import Schedule

SMALL_MODEL = MTCDNConfig(
    in_channels=3, aux_channels=1, out_channels=3, frames=2,
    base_channels=8, depth=2, heads=2, neighborhood_window=3, embed_dim=16,
)


def _small_cfg(**kw):
    defaults = dict(
        epochs=2, batch_size=4, lr=1e-3, seed=0,
        schedule=Schedule(), model=SMALL_MODEL,
    )
    defaults.update(kw)
    return tr.TrainConfig(**defaults)


def _toy_samples(n=8, size=16, frames=2, seed=11):
    cfg = sg.SplitConfig(
        n_samples=n, frames=frames,
        terrain=sg.TerrainConfig(height=size, width=size),
        cloud=sg.CloudConfig(height=size, width=size, coverage=0.4),
    )
    return {f"{i:05d}": sg.generate_sample(cfg, seed, i) for i in range(n)}


@pytest.fixture(scope="module")
def toy_prepared():
    return tr.prepare_samples(_toy_samples())


def test_prepare_samples_spaces(toy_prepared):
    p = toy_prepared[0]
    assert p.y.min() >= -1.0 and p.y.max() <= 1.0
    assert p.mu.shape == (2, 3, 16, 16)
    assert p.masks.m_a.shape == (16, 16)
    assert np.all(p.y01 >= 0) and np.all(p.y01 <= 1)


def test_train_step_runs_and_reports(toy_prepared):
    cfg = _small_cfg()
    torch.manual_seed(cfg.seed)
    model = tr.MTCDN(cfg.model_config())
    opt = torch.optim.RMSprop(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(0)
    rec = tr.train_step(toy_prepared[:4], model, cfg.schedule, cfg, opt, rng)
    assert set(rec) == {"sigma", "cloud", "uncloud", "brightness", "total"}
    assert np.isfinite(rec["total"])


def test_train_step_plain_mse_gradient_equivalence(toy_prepared):
    # lambda = (1, 0, 0) with all-ones cloud weights gives exactly the plain
    # MSE gradient
    cfg = _small_cfg(
        lambda_cloud=1.0, lambda_uncloud=0.0, lambda_brightness=0.0,
    )
    torch.manual_seed(0)
    model = tr.MTCDN(cfg.model_config())
    prep = toy_prepared[0]
    ones_masks = cl.CloudMasks(
        m_a=torch.ones_like(prep.masks.m_a),
        m_ua=torch.zeros_like(prep.masks.m_ua),
        v_d=prep.masks.v_d,
        alpha_est=prep.masks.alpha_est,
    )
    sig = 1.0
    x = prep.y[None, None] + cfg.schedule.alpha * sig * prep.mu[None] + sig * torch.zeros_like(prep.mu[None])
    out = tr.denoise(model, cfg.schedule, x, sig, prep.mu[None], prep.aux[None])
    target = prep.y[None].expand(2, -1, -1, -1)
    w_t = cfg.schedule.loss_weight(sig)

    total_a, _ = cl.total_loss(out[0], target, ones_masks, cfg.loss_weights(), w_t)
    grads_a = torch.autograd.grad(total_a, model.parameters(), retain_graph=True)
    mse = w_t * ((out[0] - target) ** 2).mean()
    grads_b = torch.autograd.grad(mse, model.parameters())
    for ga, gb in zip(grads_a, grads_b):
        assert torch.allclose(ga, gb, atol=1e-9)


def test_training_deterministic_trajectories(toy_prepared):
    cfg = _small_cfg(epochs=6)
    _, hist_a = tr.train_model(toy_prepared, cfg)
    _, hist_b = tr.train_model(toy_prepared, cfg)
    assert len(hist_a) >= 10
    for ra, rb in zip(hist_a[:12], hist_b[:12]):
        assert ra["total"] == rb["total"]
        assert ra["sigma"] == rb["sigma"]


def test_training_seed_changes_trajectory(toy_prepared):
    _, hist_a = tr.train_model(toy_prepared, _small_cfg())
    _, hist_b = tr.train_model(toy_prepared, _small_cfg(seed=1))
    assert hist_a[0]["total"] != hist_b[0]["total"]


def test_masks_model_independent(toy_prepared):
    before = [p.masks.m_a.clone() for p in toy_prepared]
    tr.train_model(toy_prepared, _small_cfg())
    for p, m in zip(toy_prepared, before):
        assert torch.equal(p.masks.m_a, m)


def test_checkpoints_and_log_written(tmp_path, toy_prepared):
    cfg = _small_cfg(epochs=2)
    model, history = tr.train_model(toy_prepared, cfg, run_dir=tmp_path)
    assert (tmp_path / "ckpt-0").is_file()
    assert (tmp_path / "ckpt-1").is_file()
    lines = (tmp_path / "train_log.jsonl").read_text().strip().splitlines()
    assert len(lines) == len(history)
    rec = json.loads(lines[0])
    assert {"step", "sigma", "cloud", "uncloud", "brightness", "total"} <= set(rec)

    # checkpoint round-trip reproduces the forward pass bit-exactly
    loaded, sched = tr.load_model(tmp_path / "ckpt-1")
    prep = toy_prepared[0]
    x = prep.y[None, None] + 0.5 * prep.mu[None]
    with torch.no_grad():
        a = tr.denoise(model.eval(), cfg.schedule, x, 0.7, prep.mu[None], prep.aux[None])
        b = tr.denoise(loaded, sched, x, 0.7, prep.mu[None], prep.aux[None])
    assert torch.equal(a, b)


def test_nonfinite_loss_aborts_with_ids(toy_prepared):
    cfg = _small_cfg()
    torch.manual_seed(0)
    model = tr.MTCDN(cfg.model_config())
    with torch.no_grad():
        model.out_conv.bias.fill_(float("nan"))
        model.out_conv.weight.fill_(1.0)
    opt = torch.optim.RMSprop(model.parameters(), lr=cfg.lr)
    with pytest.raises(NumericError, match="00000"):
        tr.train_step(toy_prepared[:1], model, cfg.schedule, cfg, opt, np.random.default_rng(0))


def test_baselines():
    samples = _toy_samples(n=2)
    s = samples["00000"]
    mean_img = tr.baseline_temporal_mean(s.x)
    assert mean_img.shape == s.y.shape
    assert np.allclose(mean_img, s.x.mean(axis=0))
    least = tr.baseline_least_cloudy(s.x, s.coverage)
    assert np.array_equal(least, s.x[np.argmin(s.coverage)])


def test_cloud_region_psnr():
    samples = _toy_samples(n=1)
    s = samples["00000"]
    perfect = tr.cloud_region_psnr(s.y, s.y, s.alpha_true)
    assert perfect == float("inf")
    noisy = s.y + 0.1
    val = tr.cloud_region_psnr(noisy, s.y, s.alpha_true)
    assert val == pytest.approx(20.0, abs=1e-4)


def test_evaluate_and_sample_scene(toy_prepared):
    cfg = _small_cfg(epochs=1)
    model, _ = tr.train_model(toy_prepared[:4], cfg)
    sampler_cfg = dr.SamplerConfig(n_steps=2, n_resample=0, guide="none", seed=0)
    pred = tr.sample_scene(model, cfg.schedule, toy_prepared[0], sampler_cfg)
    assert pred.shape == (3, 16, 16)
    assert pred.min() >= 0 and pred.max() <= 1
    report = tr.evaluate_model(model, cfg.schedule, toy_prepared[:2], sampler_cfg)
    assert report.count == 2
    assert "psnr" in report.aggregates()


def test_run_ablation_isolates_failures(toy_prepared):
    good = _small_cfg(epochs=1)
    bad = _small_cfg(epochs=1, model=MTCDNConfig(
        in_channels=3, aux_channels=1, frames=2, base_channels=8, depth=2,
        heads=2, neighborhood_window=13, embed_dim=16,  # window too large
    ))
    sampler_cfg = dr.SamplerConfig(n_steps=2, n_resample=0, guide="none", seed=0)
    rows = tr.run_ablation(
        [("good", good), ("bad", bad)], toy_prepared[:4], toy_prepared[:2], sampler_cfg
    )
    assert rows[0]["name"] == "good" and "psnr" in rows[0]
    assert rows[1]["name"] == "bad" and "error" in rows[1]
    table = tr.format_table(rows)
    assert "good" in table and "bad" in table


def test_training_loss_decreases():
    # scaled-down cousin of the acceptance-suite training run; the reduction
    # factor is pinned from the first successful run of this configuration
    # (observed 0.57 after 40 epochs)
    samples = _toy_samples(n=24, size=16, frames=2, seed=5)
    prepared = tr.prepare_samples(samples)
    cfg = _small_cfg(epochs=40, batch_size=8)
    _, history = tr.train_model(prepared, cfg)
    per_epoch = len(prepared) // cfg.batch_size
    first = float(np.mean([h["total"] for h in history[:per_epoch]]))
    last = float(np.mean([h["total"] for h in history[-per_epoch:]]))
    assert last < 0.7 * first
