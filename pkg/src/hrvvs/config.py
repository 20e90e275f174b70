"""Run configuration: every hyperparameter, validated, JSON round-trippable."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised on unknown keys or invalid hyperparameter values."""


@dataclass
class RunConfig:
    # geometry
    resolution: tuple[int, int] = (128, 128)  # model input (height, width)
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    num_vessel_classes: int = 2
    # prior branch
    codebook_size: int = 64
    codebook_dim: int = 32
    var_hidden_channels: int = 32
    var_embed_dim: int = 64
    var_depth: int = 2
    var_pretrain_steps: int = 100
    var_pretrain_lr: float = 1e-3
    # memory
    mem_capacity: int = 4
    mem_max_age_exp: int = 3
    mem_stages: tuple[int, ...] = (5,)
    mem_pe_dim: int = 16
    # attention
    heads: int = 4
    dropout: float = 0.1
    # fusion
    delta: float = 0.9
    # optimization
    learning_rate: float = 1e-3
    lr_decay_power: float = 0.9
    epochs: int = 4
    batch_size: int = 2  # windows per optimizer step
    clip_len: int = 4
    max_steps: int | None = None
    seed: int = 0
    # ablation
    no_var: bool = False
    no_msim: bool = False
    no_dwfm: bool = False

    def __post_init__(self) -> None:
        self.resolution = tuple(self.resolution)  # type: ignore[assignment]
        self.stage_channels = tuple(self.stage_channels)  # type: ignore[assignment]
        self.mem_stages = tuple(self.mem_stages)  # type: ignore[assignment]
        h, w = self.resolution
        if h % 64 != 0 or w % 64 != 0:
            raise ConfigError(f"resolution must be divisible by 64, got {h}x{w}")
        if len(self.stage_channels) != 5:
            raise ConfigError("stage_channels needs exactly 5 entries")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.clip_len < 1:
            raise ConfigError("clip_len must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if any(s not in (1, 2, 3, 4, 5) for s in self.mem_stages):
            raise ConfigError("mem_stages must reference encoder stages 1..5")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["resolution"] = list(self.resolution)
        out["stage_channels"] = list(self.stage_channels)
        out["mem_stages"] = list(self.mem_stages)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def desk_profile(**overrides) -> RunConfig:
    """Small CPU-friendly defaults for minutes-scale experiments."""
    cfg = {
        "resolution": (128, 128),
        "epochs": 4,
        "batch_size": 2,
        "learning_rate": 2e-3,
        "var_pretrain_steps": 100,
    }
    cfg.update(overrides)
    return RunConfig(**cfg)


def paper_profile(**overrides) -> RunConfig:
    """Published training recipe, recorded verbatim; not runnable at desk scale.

    1080x1920 sources are reflect-padded/resized to the nearest stride-64
    grid (1088x1920).
    """
    cfg = {
        "resolution": (1088, 1920),
        "epochs": 15,
        "batch_size": 32,
        "learning_rate": 1e-5,
        "lr_decay_power": 0.9,
    }
    cfg.update(overrides)
    return RunConfig(**cfg)
