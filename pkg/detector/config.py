"""TOML configuration for training, baselines, dataset generation and sweeps.

Example::

    [model]
    hidden_width = 200

    [train]
    lambda = 1e-2
    mu = 5e2
    stage2_mode = "replay"

    [baselines]
    knn_k = [1, 2, 5, 10, 50]

    [generation]
    n_base = 10
    n_per_base = 1000

    [sweep]
    trials = 5

Missing keys take the defaults of the matching value objects; unknown
sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

from pydantic import TypeAdapter, ValidationError

from detector.baselines import BaselineGrid
from detector.network import MLPConfig
from detector.transfer import TrainConfig
from gridsim.dataset import GenerationConfig
from gridsim.errors import ConfigError
from gridsim.grid_model import PerturbScope

T = TypeVar("T")

METHODS = ("proposed", "dnn_b", "lr", "knn", "gnb", "bdd")
SECTIONS = ("model", "train", "baselines", "generation", "sweep")
ALIASES = {"train": {"lambda": "lam"}}


@dataclass(frozen=True)
class SweepConfig:
    trials: int = 5
    methods: Tuple[str, ...] = METHODS
    sigma_target: float = 0.01
    target_scale: float = 2.0
    test_scale: float = 0.2
    perturb_scope: PerturbScope = PerturbScope.R_AND_X
    include_runtime: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "perturb_scope", PerturbScope(self.perturb_scope))
        unknown = sorted(set(self.methods) - set(METHODS))
        if unknown:
            raise ValueError(f"unknown methods {unknown} (choose from {', '.join(METHODS)})")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.target_scale <= 0 or self.test_scale <= 0:
            raise ValueError("target_scale and test_scale must be positive")


@dataclass(frozen=True)
class ConfigBundle:
    model: Mapping[str, Any] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    baselines: BaselineGrid = field(default_factory=BaselineGrid)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def mlp_config(self, input_dim: int) -> MLPConfig:
        return _build(MLPConfig, {**self.model, "input_dim": input_dim}, "model")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "baselines": dataclasses.asdict(self.baselines),
            "generation": self.generation.to_dict(),
            "sweep": {**dataclasses.asdict(self.sweep), "perturb_scope": self.sweep.perturb_scope.value},
        }


def _build(cls: Type[T], values: Mapping[str, Any], section: str) -> T:
    try:
        return TypeAdapter(cls).validate_python(dict(values))
    except (ValidationError, ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _section(document: Mapping[str, Any], name: str, cls: type, exclude: Tuple[str, ...] = ()) -> Dict[str, Any]:
    raw = document.get(name, {})
    if not isinstance(raw, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    aliases = ALIASES.get(name, {})
    values = {aliases.get(key, key): value for key, value in raw.items()}
    allowed = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(unknown)}")
    return values


def config_from_dict(document: Mapping[str, Any]) -> ConfigBundle:
    unknown = sorted(set(document) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    model = _section(document, "model", MLPConfig, exclude=("input_dim",))
    _build(MLPConfig, {**model, "input_dim": 1}, "model")
    return ConfigBundle(
        model=model,
        train=_build(TrainConfig, _section(document, "train", TrainConfig), "train"),
        baselines=_build(BaselineGrid, _section(document, "baselines", BaselineGrid), "baselines"),
        generation=_build(GenerationConfig, _section(document, "generation", GenerationConfig), "generation"),
        sweep=_build(SweepConfig, _section(document, "sweep", SweepConfig), "sweep"),
    )


def load_config(path: Optional[Path] = None) -> ConfigBundle:
    """Read a TOML config; ``None`` gives the defaults."""

    if path is None:
        return ConfigBundle()
    try:
        with Path(path).open("rb") as handle:
            document = tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    return config_from_dict(document)
