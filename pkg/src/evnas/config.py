"""Run configuration and its flat ``section.key = value`` text format.

Example::

    seed = 3
    preset = mut
    output_dir = runs/mut-3
    evolution.population_size = 8
    supernet.cells = 4
    data.noise = 0.9

Values are parsed as ``true``/``false``, ``none``, integers, floats, or left
as strings. ``preset`` sets the evolution mode flags first; any flag given
explicitly in the file overrides it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .evolution import PRESETS, EvolutionConfig


class ConfigError(ValueError):
    pass


@dataclass
class SearchSpaceConfig:
    inputs: int = 2
    intermediates: int = 4


@dataclass
class SupernetConfig:
    cells: int = 4
    channels: int = 8
    stem_multiplier: int = 3
    dtype: str = "float32"


@dataclass
class TrainConfig:
    batch_size: int = 32
    grad_clip: Optional[float] = None


@dataclass
class OptimizerConfig:
    lr_max: float = 0.025
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4


@dataclass
class DataConfig:
    kind: str = "synthetic"
    num_classes: int = 4
    train_per_class: int = 256
    val_per_class: int = 64
    image_size: int = 16
    base_frequency: float = 1.0
    frequency_step: float = 0.5
    noise: float = 0.6
    # None -> the run seed
    seed: Optional[int] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    val_images: Optional[str] = None
    val_labels: Optional[str] = None


@dataclass
class EvalConfig:
    batch_size: int = 64
    # None -> the whole validation split
    max_batches: Optional[int] = None


@dataclass
class SurrogateConfig:
    noise_std: float = 0.05
    # None -> derived from the run seed
    target_seed: Optional[int] = None


SECTIONS: dict[str, type] = {
    "evolution": EvolutionConfig,
    "search_space": SearchSpaceConfig,
    "supernet": SupernetConfig,
    "train": TrainConfig,
    "optimizer": OptimizerConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "surrogate": SurrogateConfig,
}

MODE_FLAGS = ("use_decode_in_training", "use_decode_in_fitness", "enable_crossover", "enable_mutation", "random_mode")


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str = "runs/default"
    preset: str = "full"
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    search_space: SearchSpaceConfig = field(default_factory=SearchSpaceConfig)
    supernet: SupernetConfig = field(default_factory=SupernetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """sha256 over everything except the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}", f"output_dir = {self.output_dir}", f"preset = {self.preset}"]
        for section in SECTIONS:
            for key, value in dataclasses.asdict(getattr(self, section)).items():
                lines.append(f"{section}.{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_value(text: str):
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if low == "none":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if origin is Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], where)
    if value is None:
        raise ConfigError(f"{where}: value may not be none")
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        return str(value)
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """``key = value`` lines to a flat dict; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def config_from_mapping(flat: dict[str, Any]) -> ExperimentConfig:
    if "seed" not in flat:
        raise ConfigError("missing mandatory key 'seed'")
    top = {"seed": flat["seed"]}
    sections: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, value in flat.items():
        if key == "seed":
            continue
        if key in ("output_dir", "preset"):
            top[key] = str(value)
            continue
        section, _, name = key.partition(".")
        cls = SECTIONS.get(section)
        if cls is None or not name:
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(cls)
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        sections[section][name] = _coerce(value, hints[name], key)

    preset = top.get("preset", "full")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    evo = {**PRESETS[preset], **sections.pop("evolution")}
    try:
        built = {name: SECTIONS[name](**vals) for name, vals in sections.items()}
        return ExperimentConfig(**top, evolution=EvolutionConfig(**evo), **built)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    flat = parse_config_text(text, str(path))
    flat.update(overrides or {})
    return config_from_mapping(flat)


__all__ = [
    "ConfigError",
    "SearchSpaceConfig",
    "SupernetConfig",
    "TrainConfig",
    "OptimizerConfig",
    "DataConfig",
    "EvalConfig",
    "SurrogateConfig",
    "ExperimentConfig",
    "MODE_FLAGS",
    "parse_value",
    "parse_config_text",
    "config_from_mapping",
    "load_config",
]
