"""Run configuration: one JSON-compatible document with typed sections.

Precedence is flags > file > defaults. Unknown keys are rejected; the fully
materialized document (defaults included) is echoed into every run directory
so a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from . import dresample, scenegen, trainer
from .errors import ConfigError
from .mtcdn import MTCDNConfig
from .schedule import Schedule

SEED_ENV_VAR = "SADERKIT_SEED"


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 200
    frames: int = 3
    channels: int = 3
    size: int = 32
    coverage: float = 0.4
    coverage_spread: float = 0.15
    softness: float = 0.25
    gain_min: float = 0.85
    gain_max: float = 1.15
    aux: bool = True
    seed: int = 0


@dataclass(frozen=True)
class LossConfig:
    lambda_cloud: float = 3.0
    lambda_uncloud: float = 1.0
    lambda_brightness: float = 2.0
    tau: float = 0.05
    cloud_radiance: float = 1.0
    plain_mse: bool = False
    disable_cloudfree: bool = False
    disable_brightness: bool = False


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    disable_tfblock: bool = False
    disable_hablock: bool = False


@dataclass(frozen=True)
class SamplerSection:
    steps: int = 4
    resample: int = 1
    guide: str = "mae"
    top_fraction: Optional[float] = None
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    data_range: float = 1.0
    preview_bands: tuple = (0, 1, 2)
    jobs: int = 1


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: Schedule = field(default_factory=Schedule)
    model: MTCDNConfig = field(default_factory=MTCDNConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name in doc:
                kwargs[f.name] = _build_section(f.default_factory, doc[f.name], f.name)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply {'section.field': value} overrides with type coercion."""
        doc = self.to_dict()
        for dotted, raw in overrides.items():
            parts = dotted.split(".")
            if len(parts) != 2:
                raise ConfigError(f"override path must be section.field, got {dotted!r}")
            section, name = parts
            if section not in doc:
                raise ConfigError(f"unknown config section {section!r}")
            if name not in doc[section]:
                raise ConfigError(f"unknown key {name!r} in section {section!r}")
            doc[section][name] = _coerce(raw, doc[section][name], dotted)
        return RunConfig.from_dict(doc)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eval"]["preview_bands"] = list(d["eval"]["preview_bands"])
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    # -- adapters ----------------------------------------------------------

    def split_config(self) -> scenegen.SplitConfig:
        d = self.data
        terrain = scenegen.TerrainConfig(channels=d.channels, height=d.size, width=d.size)
        cloud = scenegen.CloudConfig(
            height=d.size, width=d.size, coverage=d.coverage, softness=d.softness,
            cloud_radiance=self.loss.cloud_radiance,
        )
        return scenegen.SplitConfig(
            n_samples=d.n_samples,
            frames=d.frames,
            terrain=terrain,
            cloud=cloud,
            coverage_spread=d.coverage_spread,
            gain_min=d.gain_min,
            gain_max=d.gain_max,
            aux=d.aux,
        )

    def train_config(self, manifest_path: str = "") -> trainer.TrainConfig:
        model = dataclasses.replace(
            self.model,
            in_channels=self.data.channels,
            out_channels=self.data.channels,
            aux_channels=1 if self.data.aux else 0,
            frames=self.data.frames,
        )
        return trainer.TrainConfig(
            epochs=self.train.epochs,
            batch_size=self.train.batch_size,
            lr=self.train.lr,
            seed=self.train.seed,
            lambda_cloud=self.loss.lambda_cloud,
            lambda_uncloud=self.loss.lambda_uncloud,
            lambda_brightness=self.loss.lambda_brightness,
            tau=self.loss.tau,
            cloud_radiance=self.loss.cloud_radiance,
            plain_mse=self.loss.plain_mse,
            disable_cloudfree=self.loss.disable_cloudfree,
            disable_brightness=self.loss.disable_brightness,
            disable_tfblock=self.train.disable_tfblock,
            disable_hablock=self.train.disable_hablock,
            manifest_path=manifest_path,
            schedule=self.schedule,
            model=model,
        )

    def sampler_config(self, mean_coverage: Optional[float] = None) -> dresample.SamplerConfig:
        th = self.sampler.top_fraction
        if th is None and mean_coverage is not None:
            th = float(mean_coverage)
        return dresample.SamplerConfig(
            n_steps=self.sampler.steps,
            n_resample=self.sampler.resample,
            top_fraction=th,
            guide=self.sampler.guide,
            seed=self.sampler.seed,
        )


def _build_section(factory, value: dict, name: str):
    cls = factory if isinstance(factory, type) else type(factory())
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    coerced = dict(value)
    if cls is EvalConfig and "preview_bands" in coerced:
        coerced["preview_bands"] = tuple(coerced["preview_bands"])
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"bad section {name!r}: {exc}") from None


def _coerce(raw, current, dotted: str):
    """Coerce a CLI string to the type of the current value."""
    if not isinstance(raw, str):
        return raw
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{dotted}: cannot parse {raw!r} as bool")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{dotted}: cannot parse {raw!r} as int") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{dotted}: cannot parse {raw!r} as float") from None
    if current is None:
        if raw.lower() in ("none", "null"):
            return None
        try:
            return float(raw)
        except ValueError:
            return raw
    if isinstance(current, list):
        return json.loads(raw)
    return raw


def resolve_seed(flag_value: Optional[int], default: int = 0) -> int:
    """Flag beats the SADERKIT_SEED environment variable beats the default."""
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR}={env!r} is not an integer") from None
    return default
