"""Run configuration: nested dataclasses serialized as JSON with full defaulting."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .decoder import DecoderConfig
from .losses import LossWeights
from .metrics import EvalConfig
from .synth import SynthConfig


@dataclass
class OptimConfig:
    base_lr: float = 6e-4
    min_lr: float = 6e-7
    weight_decay: float = 0.01
    total_steps: int = 5000
    batch_size: int = 4
    grad_clip: float = 35.0
    eval_every: int = 500
    checkpoint_every: int = 1000


@dataclass
class RunConfig:
    decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(grid_h=40, grid_w=20))
    losses: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    num_scenes: int = 16
    out_dir: str = "runs/default"
    dtype: str = "float32"

    def __post_init__(self):
        d, s = self.decoder, self.synth
        if (d.grid_h, d.grid_w) != (s.grid_h, s.grid_w):
            raise ValueError(f"decoder grid {(d.grid_h, d.grid_w)} does not match synth grid {(s.grid_h, s.grid_w)}")
        if s.max_elements > d.num_elements:
            raise ValueError(f"scenes may hold {s.max_elements} elements but the decoder has {d.num_elements} slots")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        kinds = {"decoder": DecoderConfig, "losses": LossWeights, "eval": EvalConfig,
                 "synth": SynthConfig, "optim": OptimConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, value in raw.items():
            if key in kinds:
                sub_fields = {f.name for f in dataclasses.fields(kinds[key])}
                bad = set(value) - sub_fields
                if bad:
                    raise ValueError(f"unknown keys in {key}: {sorted(bad)}")
                if key == "decoder":
                    value = {**dataclasses.asdict(cls().decoder), **value}
                kw[key] = kinds[key](**value)
            else:
                kw[key] = value
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def overfit_config(**overrides) -> RunConfig:
    """Desk-scale overfit recipe: 16 scenes, E=10, P=8, C=32, L=3, 40x20 grid, batch 4."""
    cfg = RunConfig(
        decoder=DecoderConfig(num_elements=10, num_points=8, channels=32, num_layers=3,
                              grid_h=40, grid_w=20, ffn_dim=64),
        optim=OptimConfig(total_steps=5000, batch_size=4),
        num_scenes=16,
    )
    raw = cfg.to_dict()
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw[key].update(value)
        else:
            raw[key] = value
    return RunConfig.from_dict(raw)
