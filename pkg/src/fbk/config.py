"""Run configuration and seeded random streams."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError


@dataclass
class TrainConfig:
    # model
    preset: str = "fb-dense"
    k: int = 20
    p: float = 0.5
    kernel: int = 1
    width: list = field(default_factory=lambda: [16, 32, 64])
    dropout: float = 0.0
    inverted_dropfactor: bool = False
    factor_std: float | None = None
    debug: bool = False
    dtype: str = "float64"
    # optimization
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_factors: bool = True
    decay_bn: bool = False
    batch_size: int = 128
    epochs: int = 10
    lr_steps: list = field(default_factory=list)
    lr_decay: float = 0.1
    warmup_epochs: float = 3
    warmup_start: float = 0.1
    warmup_shape: str = "linear"
    seed: int = 0
    # data
    dataset: str = "synthetic"
    augment: bool = False
    synth_n: int = 16
    synth_rank: int = 4
    synth_classes: int = 4
    synth_train: int = 4000
    synth_test: int = 2000
    synth_noise: float = 0.0
    synth_linear_scale: float = 1.0
    synth_image_shape: list = field(default_factory=lambda: [3, 8, 8])
    cifar_subset: int = 0
    data_dir: str | None = None
    # run control
    threads: int = 1
    max_wallclock: float = 0.0
    checkpoint: str | None = None
    resume: str | None = None
    # gradcheck
    gc_ks: list = field(default_factory=lambda: [0, 1, 5, 20])
    gc_kernels: list = field(default_factory=lambda: [1, 3])
    gc_threshold: float = 1e-5
    # bench
    bench_ns: list = field(default_factory=lambda: [256, 512, 1024, 2048, 4096])
    bench_ks: list = field(default_factory=lambda: [4, 8, 16, 32, 64])
    bench_fixed_k: int = 8
    bench_fixed_n: int = 1024
    bench_c: int = 8
    bench_batch: int = 64
    bench_reps: int = 9
    # ablation grids
    ablate_ks: list = field(default_factory=lambda: [10, 20, 50, 80])
    ablate_ps: list = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    ablate_kernels: list = field(default_factory=lambda: [1, 3])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr", "batch_size", "epochs", "threads", "lr_decay", "warmup_start"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("momentum", "weight_decay", "warmup_epochs", "synth_noise", "max_wallclock"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"p must lie in (0, 1], got {self.p}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout}")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if list(self.lr_steps) != sorted(self.lr_steps):
            raise ConfigError(f"lr_steps must be increasing, got {self.lr_steps}")
        if self.warmup_shape not in ("linear", "constant"):
            raise ConfigError(f"unknown warmup_shape {self.warmup_shape!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.synth_rank > self.synth_n:
            raise ConfigError("synth_rank must not exceed synth_n")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes) -> TrainConfig:
        return from_dict({**self.to_dict(), **changes})


_FIELDS = {f.name for f in fields(TrainConfig)}


def from_dict(values: dict) -> TrainConfig:
    unknown = sorted(set(values) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def load_config(path: str | Path | None = None, overrides=(), seed: int | None = None) -> TrainConfig:
    """Read a YAML key/value file, then apply ``key=value`` overrides and the seed flag."""
    values = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping of keys to values")
        values.update(loaded)
    values.update(parse_overrides(overrides))
    if seed is not None:
        values["seed"] = seed
    return from_dict(values)


_STREAMS = {"init": 1, "mask": 2, "augment": 3, "data": 4, "bench": 5, "check": 6}


class RngStreams:
    """Named generators derived from one root seed.

    ``get("mask", epoch)`` always returns a fresh generator in the same state
    for the same arguments, so a run resumed at an epoch boundary replays the
    exact random sequence of an uninterrupted run.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def get(self, name: str, *keys: int) -> np.random.Generator:
        if name not in _STREAMS:
            raise ConfigError(f"unknown rng stream {name!r}")
        return np.random.default_rng([self.seed, _STREAMS[name], *map(int, keys)])
