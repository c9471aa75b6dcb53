"""Pipeline configuration: one YAML document with a section per stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .query_eval import TransferConfig
from .scene_model import ClusterConfig, QueryConfig, RenderConfig
from .synth import SynthSpec
from .triangulate import SeedConfig


class ConfigError(ValueError):
    """The configuration document is malformed or has unknown keys."""


@dataclass(frozen=True)
class InitConfig:
    tau_alpha: float = 0.6
    stride: int = 2
    dedup_radius: float = 0.02
    scale_factor: float = 0.3

    @property
    def seeds(self) -> SeedConfig:
        return SeedConfig(self.tau_alpha, self.stride, self.dedup_radius)


@dataclass(frozen=True)
class PQConfig:
    m: Optional[int] = None
    iters: int = 25
    seed: int = 0


@dataclass(frozen=True)
class PathConfig:
    work_dir: str = "work"
    manifest: Optional[str] = None  # external data; synthetic data is generated when unset


_SECTIONS = {
    "synth": SynthSpec,
    "init": InitConfig,
    "cluster": ClusterConfig,
    "render": RenderConfig,
    "query": QueryConfig,
    "transfer": TransferConfig,
    "pq": PQConfig,
    "paths": PathConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    init: InitConfig = field(default_factory=InitConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    pq: PQConfig = field(default_factory=PQConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    @classmethod
    def from_dict(cls, doc: Optional[dict]) -> "PipelineConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping of sections")
        unknown = sorted(set(doc) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        sections = {}
        for name, kind in _SECTIONS.items():
            body = doc.get(name) or {}
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in dataclasses.fields(kind)}
            bad = sorted(set(body) - allowed)
            if bad:
                raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(bad)}")
            try:
                sections[name] = kind(**body)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        return cls(**sections)

    def to_dict(self) -> dict[str, Any]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def replace(self, section: str, **changes) -> "PipelineConfig":
        try:
            updated = dataclasses.replace(getattr(self, section), **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {section!r} override: {exc}") from exc
        return dataclasses.replace(self, **{section: updated})


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return PipelineConfig.from_dict(doc)


def dump_config(config: PipelineConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
