import json

import numpy as np
import pytest

from saderkit import scenegen as sg
from saderkit.errors import ConfigError, DataError


def test_terrain_deterministic():
    cfg = sg.TerrainConfig()
    a = sg.generate_terrain(cfg, 7)
    b = sg.generate_terrain(cfg, 7)
    assert np.array_equal(a.pixels, b.pixels)


def test_terrain_seed_sensitivity():
    cfg = sg.TerrainConfig()
    a = sg.generate_terrain(cfg, 1)
    b = sg.generate_terrain(cfg, 2)
    assert not np.array_equal(a.pixels, b.pixels)


def test_terrain_zero_feature_density():
    cfg = sg.TerrainConfig(feature_density=0.0)
    scene = sg.generate_terrain(cfg, 3)
    assert scene.pixels.min() < scene.pixels.max()
    assert scene.pixels.min() >= 0.0 and scene.pixels.max() <= 1.0


def test_terrain_value_range():
    cfg = sg.TerrainConfig(value_min=0.1, value_max=0.8)
    scene = sg.generate_terrain(cfg, 5)
    assert scene.pixels.min() >= 0.1 - 1e-6
    assert scene.pixels.max() <= 0.8 + 1e-6


def test_terrain_histogram_diversity():
    # 64x64 output occupies at least 10 of 32 histogram bins
    cfg = sg.TerrainConfig(height=64, width=64)
    scene = sg.generate_terrain(cfg, 11)
    hist, _ = np.histogram(scene.pixels, bins=32, range=(0.0, 1.0))
    assert (hist > 0).sum() >= 10


def test_terrain_invalid_dims():
    with pytest.raises(ConfigError):
        sg.generate_terrain(sg.TerrainConfig(height=4), 0)
    with pytest.raises(ConfigError):
        sg.generate_terrain(sg.TerrainConfig(channels=2), 0)


def test_cloud_alpha_empty_and_full():
    cfg0 = sg.CloudConfig(coverage=0.0)
    assert np.all(sg.generate_cloud_alpha(cfg0, 1).alpha == 0.0)
    cfg1 = sg.CloudConfig(coverage=1.0, softness=0.0)
    assert np.all(sg.generate_cloud_alpha(cfg1, 1).alpha == 1.0)


def test_cloud_alpha_range():
    layer = sg.generate_cloud_alpha(sg.CloudConfig(coverage=0.5), 9)
    assert layer.alpha.min() >= 0.0 and layer.alpha.max() <= 1.0


def test_cloud_alpha_realized_coverage():
    # over 100 seeds at 64x64, realized coverage stays within +-0.1 of target
    cfg = sg.CloudConfig(coverage=0.4, height=64, width=64)
    covs = [sg.generate_cloud_alpha(cfg, seed).coverage for seed in range(100)]
    assert min(covs) >= 0.3 and max(covs) <= 0.5
    assert 0.3 <= float(np.mean(covs)) <= 0.5


def test_composite_no_cloud_identity():
    scene = sg.generate_terrain(sg.TerrainConfig(), 1)
    layer = sg.CloudLayer(np.zeros((32, 32), np.float32))
    out = sg.composite_sample(scene, [layer], [1.0], aux=False)
    assert np.array_equal(out.x[0], scene.pixels)


def test_composite_full_cloud():
    scene = sg.generate_terrain(sg.TerrainConfig(), 1)
    layer = sg.CloudLayer(np.ones((32, 32), np.float32), cloud_radiance=1.0)
    out = sg.composite_sample(scene, [layer], [1.0], aux=False)
    assert np.all(out.x[0] == 1.0)


def test_composite_direct_value():
    # y = 0.2, alpha = 0.5, radiance 1.0, gain 1 -> pixel 0.6
    scene = sg.CloudFreeScene(np.full((1, 8, 8), 0.2, np.float32), seed=0)
    layer = sg.CloudLayer(np.full((8, 8), 0.5, np.float32))
    out = sg.composite_sample(scene, [layer], [1.0], aux=False)
    assert np.allclose(out.x[0], 0.6, atol=1e-7)


def test_composite_shape_mismatch():
    scene = sg.CloudFreeScene(np.zeros((1, 8, 8), np.float32), seed=0)
    layer = sg.CloudLayer(np.zeros((4, 4), np.float32))
    with pytest.raises(ConfigError):
        sg.composite_sample(scene, [layer], [1.0])
    with pytest.raises(ConfigError):
        sg.composite_sample(scene, [layer, layer], [1.0])


def test_composite_coverage_bookkeeping():
    cfg = sg.SplitConfig(n_samples=1, frames=4)
    s = sg.generate_sample(cfg, 5, 0)
    for t in range(4):
        assert s.coverage[t] == float(np.mean(s.alpha_true[t] > 0))


def test_composite_bit_exact_by_construction():
    # stored frames equal one float64 evaluation of the compositing model
    # rounded once to float32
    cfg = sg.SplitConfig(n_samples=1, frames=3)
    s = sg.generate_sample(cfg, 31, 0)
    for t in range(3):
        a = s.alpha_true[t][None].astype(np.float64)
        comp = (1.0 - a) * s.y.astype(np.float64) + a * 1.0
        expected = np.clip(float(s.brightness_gain[t]) * comp, 0.0, 1.0).astype(np.float32)
        assert np.array_equal(s.x[t], expected)


def test_reconstruction_identity():
    # (x/gain - alpha*radiance) / (1 - alpha) recovers y wherever alpha < 1
    # and no clamping occurred, within 1e-6 (evaluated in float64)
    cfg = sg.SplitConfig(n_samples=1, frames=3)
    for sid in range(5):
        s = sg.generate_sample(cfg, 123, sid)
        y = s.y.astype(np.float64)
        for t in range(3):
            a = s.alpha_true[t][None].astype(np.float64)
            g = float(s.brightness_gain[t])
            comp = (1 - a) * y + a * 1.0
            unclamped = g * comp <= 1.0
            mask = (a < 1.0) & unclamped
            rec = (s.x[t].astype(np.float64) / g - a * 1.0) / np.where(mask, 1 - a, 1.0)
            assert np.abs((rec - y)[mask]).max() < 1e-6


def test_generate_sample_deterministic_and_independent():
    cfg = sg.SplitConfig(n_samples=2, frames=2)
    a = sg.generate_sample(cfg, 9, 0)
    b = sg.generate_sample(cfg, 9, 0)
    c = sg.generate_sample(cfg, 9, 1)
    assert np.array_equal(a.x, b.x)
    assert not np.array_equal(a.x, c.x)


def test_aux_edge_map_properties():
    cfg = sg.SplitConfig(n_samples=1, frames=3)
    s = sg.generate_sample(cfg, 21, 0)
    assert s.aux.shape == (3, 1, 32, 32)
    assert np.array_equal(s.aux[0], s.aux[1])  # cloud-invariant, from y only
    assert s.aux.min() >= 0.0 and s.aux.max() <= 1.0


def test_training_space_roundtrip():
    v = np.linspace(0, 1, 11)
    assert np.allclose(sg.from_training_space(sg.to_training_space(v)), v)
    assert sg.to_training_space(0.0) == -1.0
    assert sg.to_training_space(1.0) == 1.0


# ---------------------------------------------------------------------------
# on-disk format


def test_split_roundtrip(tmp_path):
    cfg = sg.SplitConfig(n_samples=4, frames=2)
    manifest = sg.write_split(cfg, 77, tmp_path, "train")
    assert len(manifest.sample_ids) == 4
    loaded = sg.load_manifest(tmp_path / "train")
    assert loaded.sample_ids == manifest.sample_ids
    assert loaded.mean_coverage == pytest.approx(manifest.mean_coverage)

    samples, report = sg.load_split(loaded)
    assert report.accepted == 4 and not report.rejected
    ref = sg.generate_sample(cfg, 77, 2)
    got = samples["00002"]
    assert np.array_equal(got.x, ref.x)
    assert np.array_equal(got.y, ref.y)
    assert np.array_equal(got.aux, ref.aux)
    assert np.array_equal(got.alpha_true, ref.alpha_true)


def test_split_regeneration_identical(tmp_path):
    cfg = sg.SplitConfig(n_samples=3, frames=2)
    sg.write_split(cfg, 5, tmp_path / "a", "train")
    sg.write_split(cfg, 5, tmp_path / "b", "train")
    ma = (tmp_path / "a/train/manifest.json").read_bytes()
    mb = (tmp_path / "b/train/manifest.json").read_bytes()
    assert ma == mb
    fa = (tmp_path / "a/train/00001/t0.f32").read_bytes()
    fb = (tmp_path / "b/train/00001/t0.f32").read_bytes()
    assert fa == fb


def test_ingest_normalization_protocol(tmp_path):
    # raw optical values divided by the scale then clipped to [0, 1]
    d = tmp_path / "ext" / "00000"
    d.mkdir(parents=True)
    raw = np.array([[[0.0, 10000.0], [12000.0, 5000.0]]], dtype=np.float32)
    d.joinpath("t0.f32").write_bytes(raw.astype("<f4").tobytes())
    d.joinpath("target.f32").write_bytes(raw.astype("<f4").tobytes())
    meta = {
        "T": 1, "C": 1, "H": 2, "W": 2, "dtype": "float32",
        "normalization": {"offset": 0.0, "scale": 10000.0},
        "aux_channels": 0, "has_alpha": False,
    }
    d.joinpath("meta.json").write_text(json.dumps(meta))
    manifest = sg.DatasetManifest(
        root=str(tmp_path), split="ext", sample_ids=["00000"],
        frames=1, channels=1, height=2, width=2,
        normalization=meta["normalization"], has_alpha=False, has_aux=False,
    )
    samples, report = sg.load_split(manifest)
    assert report.accepted == 1
    s = samples["00000"]
    assert s.alpha_true is None
    assert s.x[0, 0, 0, 0] == 0.0
    assert s.x[0, 0, 0, 1] == 1.0  # 10000 / 10000
    assert s.x[0, 0, 1, 0] == 1.0  # clipped at the scale ceiling
    assert s.x[0, 0, 1, 1] == pytest.approx(0.5)
    # training-space mapping sends 0 -> -1 and the clipped max -> 1
    tr = sg.to_training_space(s.x)
    assert tr.min() == -1.0 and tr.max() == 1.0


def test_ingest_rejects_bad_samples(tmp_path):
    cfg = sg.SplitConfig(n_samples=3, frames=2)
    manifest = sg.write_split(cfg, 3, tmp_path, "train")
    # corrupt one sample: truncate a frame file
    victim = tmp_path / "train" / "00001" / "t0.f32"
    victim.write_bytes(victim.read_bytes()[:100])
    # and remove another's target
    (tmp_path / "train" / "00002" / "target.f32").unlink()
    samples, report = sg.load_split(manifest)
    assert report.accepted == 1
    assert sorted(sid for sid, _ in report.rejected) == ["00001", "00002"]
    assert "00000" in samples


def test_ingest_rejects_nonfinite(tmp_path):
    cfg = sg.SplitConfig(n_samples=1, frames=1)
    manifest = sg.write_split(cfg, 3, tmp_path, "train")
    f = tmp_path / "train" / "00000" / "t0.f32"
    arr = np.frombuffer(f.read_bytes(), dtype="<f4").copy()
    arr[0] = np.nan
    f.write_bytes(arr.tobytes())
    samples, report = sg.load_split(manifest)
    assert not samples
    assert report.rejected and "non-finite" in report.rejected[0][1]


def test_load_manifest_missing(tmp_path):
    with pytest.raises(DataError):
        sg.load_manifest(tmp_path / "nope")
