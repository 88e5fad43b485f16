"""Synthetic multi-temporal cloudy scenes with exact ground-truth transparency.

Scenes are built in three stages:

1. a cloud-free reflectance image (multi-octave value noise plus simple
   geometric features standing in for fields and roads),
2. per-frame cloud transparency fields alpha in [0, 1] (thresholded fractal
   noise with soft edges),
3. per-pixel compositing  x = clamp(gain * ((1 - alpha) * y + alpha * c), 0, 1)
   where c is the cloud radiance (1.0 by default after normalization).

Everything is a pure function of (config, seed); per-sample randomness comes
from counter-based Philox streams keyed by (master seed, sample id), so
dataset generation is reproducible and parallel-safe.

The module also owns the on-disk sample format (raw little-endian float32
planes plus a JSON sidecar) and the normalization protocol: stored values
live in [0, 1]; training code maps them to [-1, 1] and predictions are mapped
back to [0, 1] for evaluation.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

TRAIN_MEAN = 0.5
TRAIN_STD = 0.5


def to_training_space(v):
    """[0, 1] reflectance -> [-1, 1] training space."""
    return (v - TRAIN_MEAN) / TRAIN_STD


def from_training_space(u):
    """[-1, 1] training space -> [0, 1] reflectance (not clipped)."""
    return u * TRAIN_STD + TRAIN_MEAN


# ---------------------------------------------------------------------------
# configs and domain types


@dataclass(frozen=True)
class TerrainConfig:
    channels: int = 3
    height: int = 32
    width: int = 32
    octaves: int = 4
    base_cells: int = 4
    persistence: float = 0.55
    feature_density: float = 0.5  # expected geometric features per 32x32 tile
    value_min: float = 0.05
    value_max: float = 0.85

    def validate(self):
        if self.height < 8 or self.width < 8:
            raise ConfigError("terrain requires height, width >= 8")
        if self.channels not in (1, 3, 13):
            raise ConfigError("channels must be one of 1, 3, 13")
        if not 0.0 <= self.value_min < self.value_max <= 1.0:
            raise ConfigError("need 0 <= value_min < value_max <= 1")
        if self.octaves < 1 or self.base_cells < 1:
            raise ConfigError("octaves and base_cells must be >= 1")


@dataclass(frozen=True)
class CloudConfig:
    height: int = 32
    width: int = 32
    coverage: float = 0.4  # target fraction of pixels with alpha > 0
    softness: float = 0.25  # edge falloff width in noise units; 0 = hard edges
    octaves: int = 3
    base_cells: int = 3
    cloud_radiance: float = 1.0

    def validate(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise ConfigError("coverage must lie in [0, 1]")
        if self.softness < 0:
            raise ConfigError("softness must be nonnegative")
        if not 0.0 < self.cloud_radiance <= 1.0:
            raise ConfigError("cloud_radiance must lie in (0, 1]")


@dataclass
class CloudFreeScene:
    pixels: np.ndarray  # [C, H, W] float32 in [0, 1]
    seed: int


@dataclass
class CloudLayer:
    alpha: np.ndarray  # [H, W] float32 in [0, 1]
    cloud_radiance: float = 1.0

    @property
    def coverage(self) -> float:
        return float(np.mean(self.alpha > 0))


@dataclass
class MultiTemporalSample:
    x: np.ndarray  # [T, C, H, W] cloudy observations, [0, 1]
    y: np.ndarray  # [C, H, W] cloud-free target, [0, 1]
    aux: Optional[np.ndarray]  # [T, 1, H, W] edge-map auxiliary, or None
    alpha_true: Optional[np.ndarray]  # [T, H, W]; None for ingested real data
    brightness_gain: np.ndarray  # [T]
    coverage: np.ndarray  # [T]

    @property
    def frames(self) -> int:
        return self.x.shape[0]


@dataclass
class DatasetManifest:
    root: str
    split: str
    sample_ids: list
    frames: int
    channels: int
    height: int
    width: int
    normalization: dict = field(default_factory=lambda: {"offset": 0.0, "scale": 1.0})
    mean_coverage: float = 0.0
    has_alpha: bool = True
    has_aux: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# noise fields


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """Smoothly interpolated lattice noise in [0, 1], shape [h, w]."""
    lattice = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h, endpoint=False)
    xs = np.linspace(0.0, cells, w, endpoint=False)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    ty = _smoothstep(ys - y0)[:, None]
    tx = _smoothstep(xs - x0)[None, :]
    v00 = lattice[np.ix_(y0, x0)]
    v01 = lattice[np.ix_(y0, x0 + 1)]
    v10 = lattice[np.ix_(y0 + 1, x0)]
    v11 = lattice[np.ix_(y0 + 1, x0 + 1)]
    top = v00 * (1 - tx) + v01 * tx
    bot = v10 * (1 - tx) + v11 * tx
    return top * (1 - ty) + bot * ty


def _fractal_noise(rng, h, w, octaves, base_cells, persistence=0.5) -> np.ndarray:
    """Octave sum of value noise, min-max normalized to [0, 1]."""
    total = np.zeros((h, w))
    amp = 1.0
    norm = 0.0
    for o in range(octaves):
        cells = min(base_cells * (2**o), max(h, w))
        total += amp * _value_noise(rng, h, w, cells)
        norm += amp
        amp *= persistence
    total /= norm
    lo, hi = total.min(), total.max()
    if hi > lo:
        total = (total - lo) / (hi - lo)
    return total


def _rng_for(*key_parts: int) -> np.random.Generator:
    """Counter-based stream keyed by an integer tuple."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key_parts])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# generators


def generate_terrain(cfg: TerrainConfig, seed: int) -> CloudFreeScene:
    """Deterministic cloud-free scene for (cfg, seed)."""
    cfg.validate()
    rng = _rng_for(seed, 0x7E22)  # terrain stream tag
    h, w = cfg.height, cfg.width
    base = _fractal_noise(rng, h, w, cfg.octaves, cfg.base_cells, cfg.persistence)

    # Piecewise geometric features: rectangular fields and one-pixel roads.
    area_scale = (h * w) / (32.0 * 32.0)
    n_features = rng.poisson(cfg.feature_density * 4.0 * area_scale)
    for _ in range(n_features):
        if rng.random() < 0.6:  # field
            fh = int(rng.integers(h // 8, max(h // 3, h // 8 + 1)))
            fw = int(rng.integers(w // 8, max(w // 3, w // 8 + 1)))
            r = int(rng.integers(0, h - fh + 1))
            c = int(rng.integers(0, w - fw + 1))
            level = rng.uniform(0.1, 0.9)
            blend = rng.uniform(0.5, 0.9)
            base[r : r + fh, c : c + fw] = (
                blend * level + (1 - blend) * base[r : r + fh, c : c + fw]
            )
        else:  # road: straight line across the tile
            if rng.random() < 0.5:
                r = int(rng.integers(0, h))
                base[r, :] = rng.uniform(0.0, 0.25)
            else:
                c = int(rng.integers(0, w))
                base[:, c] = rng.uniform(0.0, 0.25)

    base = np.clip(base, 0.0, 1.0)

    # Per-channel spectral response keeps structure shared across bands.
    gains = rng.uniform(0.6, 1.0, size=cfg.channels)
    offsets = rng.uniform(-0.05, 0.15, size=cfg.channels)
    chans = np.clip(gains[:, None, None] * base[None] + offsets[:, None, None], 0.0, 1.0)
    pixels = cfg.value_min + (cfg.value_max - cfg.value_min) * chans
    return CloudFreeScene(pixels=pixels.astype(np.float32), seed=int(seed))


def generate_cloud_alpha(cfg: CloudConfig, seed: int) -> CloudLayer:
    """Cloud transparency field with realized coverage close to the target."""
    cfg.validate()
    h, w = cfg.height, cfg.width
    if cfg.coverage <= 0.0:
        return CloudLayer(np.zeros((h, w), np.float32), cfg.cloud_radiance)

    rng = _rng_for(seed, 0xC10D)
    fld = _fractal_noise(rng, h, w, cfg.octaves, cfg.base_cells)
    if cfg.coverage >= 1.0:
        thr = float(fld.min()) - max(cfg.softness, 1e-6)
    else:
        thr = float(np.quantile(fld, 1.0 - cfg.coverage))
    if cfg.softness == 0.0:
        alpha = (fld > thr).astype(np.float32)
    else:
        t = np.clip((fld - thr) / cfg.softness, 0.0, 1.0)
        alpha = _smoothstep(t).astype(np.float32)
        # Snap near-opaque values to an exactly opaque core. This keeps the
        # inverse of the compositing model well conditioned in float32:
        # 1 - alpha stays >= 1/8 wherever alpha < 1.
        alpha = np.where(alpha > 0.875, np.float32(1.0), alpha)
    return CloudLayer(alpha=alpha, cloud_radiance=cfg.cloud_radiance)


def sobel_edge_map(y: np.ndarray) -> np.ndarray:
    """Gradient-magnitude map of the channel-mean image, scaled to [0, 1]."""
    g = y.mean(axis=0)
    gp = np.pad(g, 1, mode="edge")
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    ky = kx.T
    gx = np.zeros_like(g, dtype=np.float64)
    gy = np.zeros_like(g, dtype=np.float64)
    for dr in range(3):
        for dc in range(3):
            patch = gp[dr : dr + g.shape[0], dc : dc + g.shape[1]]
            gx += kx[dr, dc] * patch
            gy += ky[dr, dc] * patch
    mag = np.hypot(gx, gy)
    top = mag.max()
    if top > 0:
        mag = mag / top
    return mag.astype(np.float32)


def composite_sample(
    scene: CloudFreeScene,
    layers: Sequence[CloudLayer],
    gains: Sequence[float],
    aux: bool = True,
) -> MultiTemporalSample:
    """Composite T cloud layers over one scene with per-frame brightness gain."""
    if len(layers) != len(gains):
        raise ConfigError(f"{len(layers)} layers but {len(gains)} gains")
    if not layers:
        raise ConfigError("need at least one frame")
    y = scene.pixels
    c, h, w = y.shape
    frames = []
    alphas = []
    for layer, gain in zip(layers, gains):
        if layer.alpha.shape != (h, w):
            raise ConfigError(
                f"alpha shape {layer.alpha.shape} does not match scene {(h, w)}"
            )
        # Composite in float64 with one final rounding so the stored frame is
        # within half an ulp of the exact model value.
        a = layer.alpha[None].astype(np.float64)
        comp = (1.0 - a) * y.astype(np.float64) + a * float(layer.cloud_radiance)
        frames.append(np.clip(float(gain) * comp, 0.0, 1.0).astype(np.float32))
        alphas.append(layer.alpha)
    x = np.stack(frames).astype(np.float32)
    alpha_true = np.stack(alphas).astype(np.float32)
    coverage = np.array([layer.coverage for layer in layers], dtype=np.float64)
    a_map = None
    if aux:
        edge = sobel_edge_map(y)
        a_map = np.repeat(edge[None, None], len(layers), axis=0).astype(np.float32)
    return MultiTemporalSample(
        x=x,
        y=y.astype(np.float32),
        aux=a_map,
        alpha_true=alpha_true,
        brightness_gain=np.asarray(gains, dtype=np.float64),
        coverage=coverage,
    )


@dataclass(frozen=True)
class SplitConfig:
    """Everything needed to synthesize one dataset split deterministically."""

    n_samples: int = 200
    frames: int = 3
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    cloud: CloudConfig = field(default_factory=CloudConfig)
    coverage_spread: float = 0.15  # per-frame coverage ~ U(target +- spread)
    gain_min: float = 0.85
    gain_max: float = 1.15
    aux: bool = True

    def validate(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        self.terrain.validate()
        self.cloud.validate()


def generate_sample(cfg: SplitConfig, master_seed: int, sample_id: int) -> MultiTemporalSample:
    """One sample from its own counter-based stream keyed by (master seed, id)."""
    cfg.validate()
    rng = _rng_for(master_seed, sample_id)
    terrain_seed = int(rng.integers(0, 2**31))
    scene = generate_terrain(cfg.terrain, terrain_seed)
    layers = []
    for _ in range(cfg.frames):
        cov = float(
            np.clip(
                rng.uniform(
                    cfg.cloud.coverage - cfg.coverage_spread,
                    cfg.cloud.coverage + cfg.coverage_spread,
                ),
                0.0,
                1.0,
            )
        )
        layer_cfg = CloudConfig(
            height=cfg.terrain.height,
            width=cfg.terrain.width,
            coverage=cov,
            softness=cfg.cloud.softness,
            octaves=cfg.cloud.octaves,
            base_cells=cfg.cloud.base_cells,
            cloud_radiance=cfg.cloud.cloud_radiance,
        )
        layers.append(generate_cloud_alpha(layer_cfg, int(rng.integers(0, 2**31))))
    gains = rng.uniform(cfg.gain_min, cfg.gain_max, size=cfg.frames)
    return composite_sample(scene, layers, gains, aux=cfg.aux)


# ---------------------------------------------------------------------------
# on-disk format
#
# <root>/<split>/manifest.json
# <root>/<split>/<id>/t{k}.f32         raw little-endian float32, planar C*H*W
#                    target.f32
#                    aux_t{k}.f32      optional, planar C_a*H*W
#                    alpha_t{k}.f32    optional, planar H*W
#                    meta.json


def _write_f32(path: Path, arr: np.ndarray):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path: Path, shape) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise DataError(f"{path}: expected {expected} values, found {raw.size}")
    return raw.reshape(shape).astype(np.float32)


def save_sample(sample: MultiTemporalSample, directory: Path, normalization: dict):
    directory.mkdir(parents=True, exist_ok=True)
    t, c, h, w = sample.x.shape
    for k in range(t):
        _write_f32(directory / f"t{k}.f32", sample.x[k])
        if sample.aux is not None:
            _write_f32(directory / f"aux_t{k}.f32", sample.aux[k])
        if sample.alpha_true is not None:
            _write_f32(directory / f"alpha_t{k}.f32", sample.alpha_true[k])
    _write_f32(directory / "target.f32", sample.y)
    meta = {
        "T": t,
        "C": c,
        "H": h,
        "W": w,
        "dtype": "float32",
        "normalization": normalization,
        "aux_channels": 0 if sample.aux is None else int(sample.aux.shape[1]),
        "has_alpha": sample.alpha_true is not None,
        "brightness_gain": [float(g) for g in sample.brightness_gain],
        "coverage": [float(v) for v in sample.coverage],
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def write_split(
    cfg: SplitConfig, master_seed: int, root: Path, split: str = "train"
) -> DatasetManifest:
    """Generate and persist a full split; returns its manifest."""
    cfg.validate()
    root = Path(root)
    split_dir = root / split
    split_dir.mkdir(parents=True, exist_ok=True)
    ids = [f"{i:05d}" for i in range(cfg.n_samples)]
    normalization = {"offset": 0.0, "scale": 1.0}
    coverages = []
    for i, sid in enumerate(ids):
        sample = generate_sample(cfg, master_seed, i)
        save_sample(sample, split_dir / sid, normalization)
        coverages.append(float(sample.coverage.mean()))
    manifest = DatasetManifest(
        root=str(root),
        split=split,
        sample_ids=ids,
        frames=cfg.frames,
        channels=cfg.terrain.channels,
        height=cfg.terrain.height,
        width=cfg.terrain.width,
        normalization=normalization,
        mean_coverage=float(np.mean(coverages)),
        has_alpha=True,
        has_aux=cfg.aux,
    )
    payload = manifest.to_dict()
    payload["root"] = "."  # keep the manifest relocatable
    (split_dir / "manifest.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    return manifest


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    d = json.loads(path.read_text())
    try:
        manifest = DatasetManifest(**d)
    except TypeError as exc:
        raise DataError(f"bad manifest {path}: {exc}") from None
    if manifest.root == ".":
        manifest.root = str(path.parent.parent)
        manifest.split = path.parent.name
    return manifest


@dataclass
class IngestReport:
    accepted: int = 0
    rejected: list = field(default_factory=list)  # (sample_id, reason)

    def reject(self, sample_id: str, reason: str):
        self.rejected.append((sample_id, reason))


def _normalize_optical(raw: np.ndarray, normalization: dict) -> np.ndarray:
    """Raw sensor values -> [0, 1] via the manifest's offset/scale, with clipping."""
    offset = float(normalization.get("offset", 0.0))
    scale = float(normalization.get("scale", 1.0))
    if scale <= 0:
        raise DataError("normalization scale must be positive")
    v = (raw.astype(np.float64) - offset) / scale
    return np.clip(v, 0.0, 1.0).astype(np.float32)


def iter_samples(
    manifest: DatasetManifest, report: Optional[IngestReport] = None
) -> Iterator[tuple[str, MultiTemporalSample]]:
    """Stream samples for a manifest, skipping ones that fail validation.

    Failed samples are recorded on the report (missing files, shape errors,
    non-finite values) and iteration continues.
    """
    split_dir = Path(manifest.root) / manifest.split
    t, c, h, w = manifest.frames, manifest.channels, manifest.height, manifest.width
    for sid in manifest.sample_ids:
        d = split_dir / str(sid)
        try:
            meta_path = d / "meta.json"
            if not meta_path.is_file():
                raise DataError(f"missing file: {meta_path}")
            meta = json.loads(meta_path.read_text())
            if (meta["T"], meta["C"], meta["H"], meta["W"]) != (t, c, h, w):
                raise DataError(
                    f"{sid}: meta dims {meta['T']}x{meta['C']}x{meta['H']}x{meta['W']} "
                    f"do not match manifest {t}x{c}x{h}x{w}"
                )
            norm = meta.get("normalization", manifest.normalization)
            x = np.stack([_read_f32(d / f"t{k}.f32", (c, h, w)) for k in range(t)])
            y = _read_f32(d / "target.f32", (c, h, w))
            aux = None
            ca = int(meta.get("aux_channels", 0))
            if ca > 0:
                aux = np.stack(
                    [_read_f32(d / f"aux_t{k}.f32", (ca, h, w)) for k in range(t)]
                )
            alpha = None
            if meta.get("has_alpha"):
                alpha = np.stack(
                    [_read_f32(d / f"alpha_t{k}.f32", (h, w)) for k in range(t)]
                )
            if not (np.isfinite(x).all() and np.isfinite(y).all()):
                raise DataError(f"{sid}: non-finite values")
            x = _normalize_optical(x, norm)
            y = _normalize_optical(y, norm)
            sample = MultiTemporalSample(
                x=x,
                y=y,
                aux=aux,
                alpha_true=alpha,
                brightness_gain=np.asarray(
                    meta.get("brightness_gain", [1.0] * t), dtype=np.float64
                ),
                coverage=np.asarray(meta.get("coverage", [0.0] * t), dtype=np.float64),
            )
        except DataError as exc:
            if report is not None:
                report.reject(str(sid), str(exc))
                continue
            raise
        if report is not None:
            report.accepted += 1
        yield str(sid), sample


def load_split(manifest: DatasetManifest):
    """Materialize a split; returns (samples keyed by id, ingest report)."""
    report = IngestReport()
    samples = dict(iter_samples(manifest, report))
    return samples, report
