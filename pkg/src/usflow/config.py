"""Strict JSON run configuration shared by all CLI commands."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .loss import LossConfig
from .phantom import ImagingGrid, PsfParams
from .train import DirectSolveConfig

__all__ = ["ConfigError", "RunConfig", "build_strict", "load_run_config", "apply_overrides"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InclusionConfig:
    center_mm: tuple | None = None  # None: centre of the imaging grid
    radius_mm: float = 2.0
    strain_ratio: float = 0.5


@dataclass(frozen=True)
class SimulateConfig:
    n_pairs: int = 10
    kind: str = "uniform_strain"
    axial_strain: float = 0.02
    density: float = 150.0
    inclusion: InclusionConfig = field(default_factory=InclusionConfig)
    shift_px: tuple = (0.0, 0.0)  # used by kind="shift"
    grid: ImagingGrid = field(default_factory=ImagingGrid)
    psf: PsfParams = field(default_factory=PsfParams)


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 1
    optimizer: str = "adaptive_moments"
    recompute_forward: bool = False
    freeze_backward: bool = True
    normalize: str = "unit_std"


@dataclass(frozen=True)
class PretrainSection:
    manifest: str | None = None
    epochs: int = 0
    learning_rate: float = 1e-3


@dataclass(frozen=True)
class SolveSection:
    levels: tuple = DirectSolveConfig.levels
    iterations: int = 150
    learning_rate: float = 0.05
    spacing: int = 8
    grad_tol: float = 1e-7
    divergence_factor: float = 10.0


@dataclass(frozen=True)
class BackboneSection:
    name: str = "tiny_pyramid"
    levels: int = 3
    features: tuple = (8, 16, 32)
    hidden: int = 16
    head_scale: float = 0.0
    spacing: int = 8

    def descriptor(self, shape, seed: int) -> dict:
        if self.name == "tiny_pyramid":
            return {"name": self.name, "levels": self.levels, "features": list(self.features),
                    "hidden": self.hidden, "head_scale": self.head_scale, "seed": seed}
        if self.name == "direct_field":
            return {"name": self.name, "shape": list(shape), "spacing": self.spacing, "seed": seed}
        raise ConfigError(f"unknown backbone {self.name!r}")


@dataclass(frozen=True)
class StrainSection:
    window_len: int = 43


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    solve: SolveSection = field(default_factory=SolveSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    strain: StrainSection = field(default_factory=StrainSection)
    windows: tuple = ()
    images: bool = False

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def solve_config(self):
        return DirectSolveConfig(loss=self.loss, **asdict(self.solve))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _freeze(x):
    if isinstance(x, list):
        return tuple(_freeze(v) for v in x)
    return x


def build_strict(cls, data, path: str = ""):
    """Instantiate dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        hint = hints.get(key)
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint) and value is not None:
            kwargs[key] = build_strict(hint, value, sub)
        else:
            kwargs[key] = _freeze(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings; values parse as JSON when possible."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not an object")
        node[parts[-1]] = value
    return doc


def load_run_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    return build_strict(RunConfig, doc)
