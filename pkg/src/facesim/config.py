"""Experiment configuration: one YAML file, strict keys, one top-level seed."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .crops import CropConfig
from .dataset import content_hash
from .net import NetConfig
from .training import TrainConfig
from .world import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    m_c: float = 0.85
    m_c_sweep: tuple[float, ...] = (0.6, 0.85, 1.0, 1.5, 2.0)
    pairs_per_user: int = 20

    def __post_init__(self):
        if self.m_c <= 0 or any(m <= 0 for m in self.m_c_sweep):
            raise ValueError("zoom values must be positive")
        if self.pairs_per_user < 1:
            raise ValueError("pairs_per_user must be at least 1")


@dataclass(frozen=True)
class PathsConfig:
    dataset: str = "data"
    run: str = "runs/default"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    world: WorldConfig = field(default_factory=WorldConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "split_fractions": list(self.split_fractions)}
        for name in SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            section.pop("seed", None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    @property
    def hash(self) -> str:
        """Digest of everything that affects results (paths excluded)."""
        d = self.to_dict()
        d.pop("paths")
        return content_hash(d)

    def data_hash(self) -> str:
        """Digest of the settings that determine the generated dataset."""
        d = self.to_dict()
        return content_hash({"seed": self.seed, "split_fractions": d["split_fractions"], "world": d["world"]})

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


SECTIONS = {
    "world": WorldConfig,
    "crop": CropConfig,
    "net": NetConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}
SEEDED = ("world", "train")


def _coerce(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    allowed = set(fields) - ({"seed"} if section in SEEDED else set())
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    kwargs = {}
    for name, value in values.items():
        default = getattr(cls(), name)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{section}.{name} must be a list")
            value = tuple(value)
            if default and isinstance(default[0], float):
                try:
                    value = tuple(float(v) for v in value)
                except (TypeError, ValueError):
                    raise ConfigError(f"{section}.{name} must be a list of numbers, got {value!r}") from None
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{name} must be true or false")
        elif isinstance(default, float) and not isinstance(value, bool) and isinstance(value, (int, str)):
            # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{section}.{name} must be a number, got {value!r}") from None
        elif type(default) is not type(value):
            raise ConfigError(f"{section}.{name} must be {type(default).__name__}, got {value!r}")
        kwargs[name] = value
    return kwargs


def from_dict(raw: dict | None, overrides: dict | None = None) -> ExperimentConfig:
    """Validate a parsed config; unknown keys and bad values raise ConfigError."""
    raw = dict(raw or {})
    unknown = sorted(set(raw) - {"seed", "split_fractions", *SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = (overrides or {}).get("seed", raw.get("seed", 0))
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    fractions = raw.get("split_fractions", [0.7, 0.15, 0.15])
    if (not isinstance(fractions, (list, tuple)) or len(fractions) != 3
            or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9):
        raise ConfigError(f"split_fractions must be three non-negative numbers summing to 1, got {fractions}")
    sections = {}
    for name, cls in SECTIONS.items():
        kwargs = _coerce(cls, raw.get(name) or {}, name)
        kwargs.update((overrides or {}).get(name, {}))
        if name in SEEDED:
            kwargs["seed"] = seed
        try:
            sections[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid {name!r} section: {exc}") from exc
    if sections["crop"].out_size != sections["net"].in_size:
        raise ConfigError("crop.out_size must equal net.in_size")
    return ExperimentConfig(seed=seed, split_fractions=tuple(float(f) for f in fractions), **sections)


def load(path: Path | None, overrides: dict | None = None) -> ExperimentConfig:
    if path is None:
        return from_dict({}, overrides)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return from_dict(raw, overrides)
