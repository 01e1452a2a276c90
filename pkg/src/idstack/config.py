"""One JSON run configuration shared by every command; unknown keys are rejected."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapters import ROLES, AdapterError
from .data_pipeline import PipelineConfig
from .diffusion import ModelConfig, SamplerConfig
from .encoders import ConfigurationError
from .trainer import TrainConfig

HOME_ENV = "PHOTOMAKER_HOME"


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid {name!r} section: {exc}") from exc


@dataclass
class RunConfig:
    adapters: dict[str, str] = field(default_factory=dict)
    adapter_options: dict[str, dict] = field(default_factory=dict)
    adapter_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    paths: dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        bad = (set(self.adapters) | set(self.adapter_options)) - set(ROLES)
        if bad:
            raise ConfigurationError(f"unknown adapter roles: {sorted(bad)}")
        bad_paths = set(self.paths) - {"home"}
        if bad_paths:
            raise ConfigurationError(f"unknown keys in 'paths': {sorted(bad_paths)}")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                adapters=dict(raw.get("adapters") or {}),
                adapter_options=dict(raw.get("adapter_options") or {}),
                adapter_seed=int(raw.get("adapter_seed", 0)),
                model=_section(ModelConfig, raw.get("model"), "model"),
                trainer=_section(TrainConfig, raw.get("trainer"), "trainer"),
                sampler=_section(SamplerConfig, raw.get("sampler"), "sampler"),
                pipeline=_section(PipelineConfig, raw.get("pipeline"), "pipeline"),
                paths=dict(raw.get("paths") or {}),
                seed=int(raw.get("seed", 0)),
            )
        except AdapterError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def home(self) -> Path:
        """Default output root: ``paths.home``, else $PHOTOMAKER_HOME, else ./photomaker_home."""
        if self.paths.get("home"):
            return Path(self.paths["home"])
        return Path(os.environ.get(HOME_ENV, "photomaker_home"))
