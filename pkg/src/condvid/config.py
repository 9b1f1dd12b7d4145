"""JSON run configuration: every field has a default, unknown keys are errors."""

# no `from __future__ import annotations`: _from_dict needs real classes in field.type

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


def _from_dict(cls, d: dict):
    if not isinstance(d, dict):
        raise ValueError(f"expected object for {cls.__name__}, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ValueError(f"unknown keys in {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        f = fields[name]
        if dataclasses.is_dataclass(f.type):
            kwargs[name] = _from_dict(f.type, value)
        elif isinstance(value, list):
            kwargs[name] = list(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = _to_dict(v) if dataclasses.is_dataclass(v) else v
    return out


@dataclass
class ModelSection:
    image_size: int = 128
    patch: int = 4
    latent_channels: int = 4
    channels: list = field(default_factory=lambda: [16, 32])
    temb_dim: int = 32
    text_dim: int = 16
    groups: int = 4
    ff_mult: int = 2
    cond_channels: int = 1
    max_text_tokens: int = 16
    dtype: str = "f32"


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class SamplingSection:
    steps: int = 50
    guidance_scale: float = 7.5
    seed_b: int = 0
    seed_c: int = 1
    frames: int = 8
    attention_mode: str = "sbist"
    gap: int = 3
    background: str = "noise"
    control: str = "3d"
    eps_c_scale: float = 1.0
    text: str = "a red square moving right"
    invert_with_text: bool = False
    condition_seed: int = 777


@dataclass
class DataSection:
    scenes: int = 200
    frames: int = 8
    size: int = 128
    seed: int = 100


@dataclass
class TrainSection:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 0


@dataclass
class AblationSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    attention_modes: list = field(default_factory=lambda: ["self", "sparse_causal", "sbist", "dense"])
    control_modes: list = field(default_factory=lambda: ["2d", "3d"])
    steps: int = 25
    guidance: float = 5.0
    conditions: int = 5
    condition_seed: int = 777


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    data: DataSection = field(default_factory=DataSection)
    train_image: TrainSection = field(default_factory=TrainSection)
    train_control: TrainSection = field(default_factory=lambda: TrainSection(steps=900, seed=1))
    ablation: AblationSection = field(default_factory=AblationSection)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_dict(cls, d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return _to_dict(self)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
