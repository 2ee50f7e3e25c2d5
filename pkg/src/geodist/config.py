"""Strict JSON run configuration.

Top-level sections: ``mesh``, ``denoiser``, ``training``, ``sampler``,
``eval``, ``baseline``.  Every field is optional; unknown keys and
out-of-range values raise :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .baseline_vf import VFConfig
from .denoiser import DenoiserConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class MeshSection:
    path: str | None = None
    normalize: bool = True
    n_norm_samples: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.n_norm_samples < 1000:
            raise ValueError("n_norm_samples must be >= 1000")


@dataclass
class SamplerSection:
    n_points: int = 100_000
    steps: int = 64
    solver: str = "heun"
    init: str = "gaussian"
    record: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 0:
            raise ValueError("n_points must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.solver not in ("euler", "heun"):
            raise ValueError(f"solver must be euler or heun, got {self.solver!r}")
        if self.init not in ("gaussian", "uniform"):
            raise ValueError(f"init must be gaussian or uniform, got {self.init!r}")
        for r in self.record:
            if not isinstance(r, int) or isinstance(r, bool) or not 0 <= r <= self.steps:
                raise ValueError(f"record entries must be step indices in [0, {self.steps}], got {r!r}")


@dataclass
class EvalSection:
    n_points: int = 100_000
    steps: int = 32
    solver: str = "heun"
    init: str = "gaussian"
    seed: int = 0
    compression_points: list = field(default_factory=lambda: [1_000_000, 1_000_000_000])

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.solver not in ("euler", "heun"):
            raise ValueError(f"solver must be euler or heun, got {self.solver!r}")
        if self.init not in ("gaussian", "uniform"):
            raise ValueError(f"init must be gaussian or uniform, got {self.init!r}")
        if not all(isinstance(n, (int, float)) and n > 0 for n in self.compression_points):
            raise ValueError("compression_points must be positive numbers")


@dataclass
class BaselineSection:
    width: int = 512
    depth: int = 6
    fourier_bands: int = 0
    match_params: bool = True  # pick width to match the denoiser's parameter count
    epochs: int = 100
    iters_per_epoch: int = 64
    batch_size: int = 4096
    points_per_epoch: int = 2**16
    lr: float = 1e-3
    lr_decay_iters: int = 0
    seed: int = 0

    def vf_config(self, n_params: int | None = None) -> VFConfig:
        from .baseline_vf import matched_config
        if self.match_params and n_params is not None:
            return matched_config(n_params, self.depth, self.fourier_bands)
        return VFConfig(self.width, self.depth, 3, self.fourier_bands)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, iters_per_epoch=self.iters_per_epoch, batch_size=self.batch_size,
                           points_per_epoch=self.points_per_epoch, lr=self.lr, lr_decay_iters=self.lr_decay_iters,
                           seed=self.seed)

    def __post_init__(self):
        VFConfig(self.width, self.depth, 3, self.fourier_bands)
        self.train_config()


SECTIONS = {
    "mesh": MeshSection,
    "denoiser": DenoiserConfig,
    "training": TrainConfig,
    "sampler": SamplerSection,
    "eval": EvalSection,
    "baseline": BaselineSection,
}


def _check_type(section: str, f: dataclasses.Field, value):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    where = f"{section}.{f.name}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif default is None or isinstance(default, str):
        ok = value is None or isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__} {value!r}")
    return value


def _build(section: str, cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    kwargs = {k: _check_type(section, fields[k], v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{section}: {e}") from None


@dataclass
class RunConfig:
    mesh: MeshSection = field(default_factory=MeshSection)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        return cls(**{name: _build(name, SECTIONS[name], doc.get(name, {})) for name in SECTIONS})

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self) -> str:
        return config_hash(self.to_dict())

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        """``{"section.key": value}`` applied on top of this config, revalidated."""
        doc = self.to_dict()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in doc or not key:
                raise ConfigError(f"bad override key {dotted!r}; expected section.key")
            doc[section][key] = value
        return RunConfig.from_dict(doc)


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def parse_value(text: str):
    """Interpret a command-line override value as JSON when possible, else as a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return RunConfig.from_dict(doc)
