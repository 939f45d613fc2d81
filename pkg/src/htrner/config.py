"""Single JSON run configuration with one section per stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .datasynth import DatasetConfig
from .training import ScenarioConfig
from .transformer import ModelConfig
from .vocab import SCHEMES, Vocab, build_vocab

SECTIONS = ("data", "vocab", "model", "training", "paths")


class ConfigValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    scheme: str = "joint"
    model: ModelConfig = field(default_factory=ModelConfig)
    training: ScenarioConfig = field(default_factory=ScenarioConfig)
    paths: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigValidationError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                data=DatasetConfig.from_dict(d.get("data", {})),
                scheme=d.get("vocab", {}).get("scheme", "joint"),
                model=ModelConfig.from_dict(d.get("model", {})),
                training=ScenarioConfig.from_dict(d.get("training", {})),
                paths=dict(d.get("paths", {})),
            )
        except TypeError as exc:
            raise ConfigValidationError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigValidationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "vocab": {"scheme": self.scheme},
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "paths": dict(self.paths),
        }

    def validate(self) -> None:
        try:
            if self.scheme not in SCHEMES:
                raise ValueError(f"vocab scheme must be one of {SCHEMES}")
            self.data.validate()
            self.model.validate()
            self.training.validate()
        except ValueError as exc:
            raise ConfigValidationError(str(exc)) from exc

    def vocab(self) -> Vocab:
        g = self.data.grammar
        return build_vocab(self.scheme, g.charset, g.categories, g.persons, g.observed_pairs())
