"""Run configuration: one JSON document with data/vsg/vq/prior/eval sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    T: int = 8
    H: int = 16
    W: int = 16
    C: int = 1
    min_objects: int = 1
    max_objects: int = 3
    min_given_graphs: int = 3
    max_nodes: int = 5
    sprite_size: int = 4
    speed: int = 1
    margin: float = 1.0
    motion_threshold: float = 0.5
    motion_window: int = 2
    episodes: int = 200
    seed: int = 7


@dataclass
class VSGConfig:
    d: int = 32
    spatial_layers: int = 2
    temporal_layers: int = 2
    heads: int = 4
    patch: int = 4
    frame_layers: int = 2
    losses: list = field(default_factory=lambda: ["intra", "inter", "finegrain"])
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 600
    seed: int = 0


@dataclass
class VQConfig:
    stride: int = 4
    K: int = 64
    d_z: int = 32
    hidden: int = 64
    beta: float = 0.25
    lr: float = 2e-4
    batch_size: int = 64
    steps: int = 1500
    restart_every: int = 100
    seed: int = 0


@dataclass
class PriorConfig:
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    lr: float = 1e-5
    batch_size: int = 16
    steps: int = 600
    order: int = 1
    graph_mse_weight: float = 1.0
    condition_dropout: float = 0.15
    joint_vsg: bool = False
    temperature: float = 1.0
    top_k: int = 0
    seed: int = 0


@dataclass
class EvalConfig:
    repeats: int = 5
    episodes: int = 48
    seed: int = 1000
    evaluator_steps: int = 600


SECTIONS = {"data": DataConfig, "vsg": VSGConfig, "vq": VQConfig, "prior": PriorConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vsg: VSGConfig = field(default_factory=VSGConfig)
    vq: VQConfig = field(default_factory=VQConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def validate(self) -> "RunConfig":
        if self.prior.order not in (1, 2, 3):
            raise ConfigError(f"prior.order must be 1, 2 or 3, got {self.prior.order}")
        if self.vq.K < 2 or self.vq.K > 65535:
            raise ConfigError("vq.K must lie in [2, 65535]")
        if self.vsg.d % self.vsg.heads or self.prior.d_model % self.prior.heads:
            raise ConfigError("model widths must be divisible by their head counts")
        bad = set(self.vsg.losses) - {"intra", "inter", "finegrain"}
        if bad:
            raise ConfigError(f"unknown pretraining losses {sorted(bad)}")
        if self.data.H % self.vq.stride or self.data.H % self.vsg.patch:
            raise ConfigError("frame size must be divisible by the patch size and VQ stride")
        if self.prior.temperature <= 0:
            raise ConfigError("prior.temperature must be positive")
        if not 0.0 <= self.prior.condition_dropout < 1.0:
            raise ConfigError("prior.condition_dropout must lie in [0, 1)")
        if self.eval.repeats < 1:
            raise ConfigError("eval.repeats must be at least 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(klass)}
            extra = set(sec) - known
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
            parts[name] = klass(**sec)
        return cls(**parts).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def reference_preset() -> RunConfig:
    """Full-scale dimensions and learning rates."""
    return RunConfig(
        data=DataConfig(T=16, H=128, W=128, min_given_graphs=5, sprite_size=16, speed=4, margin=4.0,
                        motion_threshold=2.0),
        vsg=VSGConfig(d=256, spatial_layers=3, temporal_layers=3, heads=4, patch=8, lr=1e-4, batch_size=12),
        vq=VQConfig(stride=16, K=1024, d_z=256, hidden=512, lr=2e-4),
        prior=PriorConfig(d_model=1024, layers=24, heads=16, lr=1e-5),
    ).validate()


def desk_preset() -> RunConfig:
    """CPU-scale run with learning rates raised for the short schedules.

    The prior needs far more episodes than 200 to generalize past memorizing
    its training videos, so the dataset is larger here.
    """
    return RunConfig(
        data=DataConfig(episodes=2000),
        vsg=VSGConfig(lr=1e-3, steps=1500),
        vq=VQConfig(lr=2e-3),
        prior=PriorConfig(d_model=64, lr=1e-3, steps=1500),
    ).validate()


PRESETS = {"desk": desk_preset, "reference": reference_preset}
