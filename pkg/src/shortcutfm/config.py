"""Run configuration: defaults < YAML file < SCFM_* environment variables < CLI flags."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import yaml

from .errors import ConfigError
from .flow import TrainConfig
from .priors import PriorSpec
from .spectro import StftConfig

ENV_PREFIX = "SCFM_"


@dataclass
class RunConfig:
    seed: int = 0
    # signal / transform
    fft_size: int = 256
    hop: int = 128
    window: str = "hann"
    # synthetic corpus
    n_train: int = 200
    n_valid: int = 20
    n_test: int = 40
    duration: float = 2.0
    unseen_noise: bool = False
    # network
    hidden: int = 256
    n_blocks: int = 3
    context: int = 1
    embed_dim: int = 16
    dtype: str = "float32"
    # training
    dt_min: float = 1.0 / 128
    dt_max: float = 0.5
    rate_sc: float = 0.25
    lambda_sc: float = 0.1
    rho: float = 0.1
    epochs: int = 20
    batch_size: int = 16
    crop_frames: int = 32
    lr: float = 1e-4
    lr_schedule: str = "constant"
    lr_min: float = 1e-5
    # prior
    prior: str = "S"
    sigma_end: float = 0.389
    alpha: float = 0.2
    # inference / evaluation
    steps: int = 1
    chunk_seconds: float = 2.0
    k_list: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    priors: list = field(default_factory=lambda: ["G", "S", "D", "F"])
    repetitions: int = 5
    jobs: int = 1
    # paths (no defaults)
    data_dir: str | None = None
    checkpoint: str | None = None
    out_dir: str | None = None
    manifest: str | None = None

    def validate(self) -> "RunConfig":
        self.stft_config()
        self.prior_spec()
        self.train_config().validate()
        for p in self.priors:
            PriorSpec(p)
        if self.steps < 1 or any(int(k) < 1 for k in self.k_list):
            raise ConfigError("step counts must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be constant or cosine")
        if not self.lr > 0 or (self.lr_schedule == "cosine" and not 0 < self.lr_min <= self.lr):
            raise ConfigError("need lr > 0 (and 0 < lr_min <= lr for the cosine schedule)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.duration <= 0 or self.chunk_seconds <= 0:
            raise ConfigError("durations must be positive")
        if self.repetitions < 3:
            raise ConfigError("repetitions must be >= 3")
        return self

    def stft_config(self) -> StftConfig:
        return StftConfig(self.fft_size, self.hop, self.window)

    def prior_spec(self, kind: str | None = None) -> PriorSpec:
        return PriorSpec(kind or self.prior, self.sigma_end, self.alpha)

    def train_config(self) -> TrainConfig:
        return TrainConfig(dt_min=self.dt_min, dt_max=self.dt_max, rate_sc=self.rate_sc,
                           lambda_sc=self.lambda_sc, rho=self.rho, batch_size=self.batch_size,
                           crop_frames=self.crop_frames)

    def net_kwargs(self) -> dict:
        return dict(hidden=self.hidden, n_blocks=self.n_blocks, context=self.context,
                    embed_dim=self.embed_dim, dtype=self.dtype)

    def learning_rate(self, epoch: int) -> float:
        """Constant, or cosine-annealed from lr (first epoch) towards lr_min."""
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * epoch / self.epochs))

    @property
    def chunk_len(self) -> int:
        return int(round(self.chunk_seconds * 16000))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_PATH_KEYS = {"data_dir", "checkpoint", "out_dir", "manifest"}


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if value is None:
        if key in _PATH_KEYS:
            return None
        raise ConfigError(f"config key {key!r} cannot be empty")
    default = _FIELDS[key].default
    if key in _PATH_KEYS:
        return str(value)
    try:
        if key in ("k_list", "priors"):
            items = value.split(",") if isinstance(value, str) else list(value)
            return [int(v) for v in items] if key == "k_list" else [str(v).strip() for v in items]
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                return low in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            # accepts "1/128" as well as plain numbers
            return float(Fraction(value.strip())) if isinstance(value, str) else float(value)
        return str(value)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


def from_mapping(mapping: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for key, value in mapping.items():
        setattr(cfg, key.replace("-", "_"), _coerce(key.replace("-", "_"), value))
    return cfg


def load_file(path) -> dict:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in _FIELDS:
                out[key] = value
    return out


def resolve(path=None, flags: dict | None = None, environ=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = from_mapping(load_file(path), cfg)
    cfg = from_mapping(env_overrides(environ), cfg)
    cfg = from_mapping({k: v for k, v in (flags or {}).items() if v is not None}, cfg)
    return cfg.validate()


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump(cfg))
