"""Run configuration: one JSON document, nested sections mirror the dataclasses."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .adversarial import LossConfig
from .dse import GranularitySchedule, SUBSPACE_ROUTING_MODES
from .sama import StageConfig

DEFAULT_GRANULARITY = (256, 128, 64, 32, 16, 8, 4, 2)


@dataclass(frozen=True)
class OptimizerConfig:
    type: str = "adam"
    beta1: float = 0.0
    beta2: float = 0.99
    lr_G: float = 1e-4
    lr_D: float = 4e-4

    def __post_init__(self):
        if self.type != "adam":
            raise ValueError(f"only adam is supported, got {self.type!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    stages: StageConfig = field(default_factory=StageConfig)
    D_t: int = 256
    K_agg: int = 4
    granularity: tuple[int, ...] = DEFAULT_GRANULARITY
    element_routing: bool = True
    subspace_routing: str = "soft"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    disc_base: int = 16
    disc_max: int = 64
    batch_size: int = 16
    steps: int = 3000
    checkpoint_every: int = 500
    out: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "granularity", tuple(int(h) for h in self.granularity))
        GranularitySchedule(self.granularity, self.D_t)
        if self.subspace_routing not in SUBSPACE_ROUTING_MODES:
            raise ValueError(f"subspace_routing must be one of {SUBSPACE_ROUTING_MODES}")
        if self.batch_size < 1 or self.steps < 0 or self.K_agg < 1:
            raise ValueError("batch_size and K_agg must be positive, steps nonnegative")

    @property
    def resolution(self) -> int:
        return self.stages.resolution

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["granularity"] = list(self.granularity)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, sub in (("stages", StageConfig), ("optimizer", OptimizerConfig), ("loss", LossConfig)):
            if key in d and isinstance(d[key], dict):
                bad = set(d[key]) - {f.name for f in dataclasses.fields(sub)}
                if bad:
                    raise ValueError(f"unknown {key} keys: {sorted(bad)}")
                d[key] = sub(**d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def toy_config(**overrides) -> RunConfig:
    """4-stage 64x64 model with 64-dim text features on the toy world."""
    base = RunConfig(
        stages=StageConfig(num_stages=4, base_grid=8, base_dim=64),
        D_t=64,
        granularity=(64, 32, 16, 8, 4, 2),
    )
    return base.replace(**overrides)


def tiny_config(**overrides) -> RunConfig:
    base = RunConfig(
        stages=StageConfig(num_stages=2, base_grid=4, base_dim=16, D_z=8, D_ca=8),
        D_t=8,
        K_agg=2,
        granularity=(1, 2, 4),
        batch_size=2,
        steps=2,
        checkpoint_every=1,
    )
    return base.replace(**overrides)
