"""Run configuration: one JSON document, overridable from the command line."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .contrast import LossConfig
from .geometry import AugmentationSpec
from .network import ModelConfig
from .pillargrid import GridSpec

SEED_ENV = "CONTRASTMOTION_SEED"

# Table-4 style rows: (loss kind, ground mask, GMF)
ABLATIONS = {
    "newcomer": ("pointinfonce", False, False),
    "a": ("sd", False, False),
    "b": ("sd", False, True),
    "c": ("sd", True, True),
    "d": ("pointinfonce", True, True),
}


@dataclass
class SceneGenConfig:
    frames: int = 10
    dt: float = 0.2
    n_boxes: tuple = (3, 6)
    max_speed: float = 5.0
    spec_path: Optional[str] = None  # JSON SceneSpec; random layout when unset


@dataclass
class RunConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec.square(8.0))
    aug: AugmentationSpec = field(default_factory=lambda: AugmentationSpec(max_shift=1.0))
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)
    patch: int = 16
    alpha: float = 2.0
    use_gmf: bool = True
    use_ground_mask: bool = True
    ground_threshold: float = 0.3
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        self.model.use_gmf = self.use_gmf

    def ablation_row(self) -> Optional[str]:
        key = (self.loss.kind, self.use_ground_mask, self.use_gmf)
        for name, row in ABLATIONS.items():
            if row == key:
                return name
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"]["pillar_size"] = list(self.grid.pillar_size)
        d["scene"]["n_boxes"] = list(self.scene.n_boxes)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError("unknown config keys: %s" % sorted(unknown))
        sub = {"grid": GridSpec, "aug": AugmentationSpec, "loss": LossConfig, "model": ModelConfig, "scene": SceneGenConfig}
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                val = dict(d[key])
                if key == "grid" and "pillar_size" in val:
                    val["pillar_size"] = tuple(val["pillar_size"])
                if key == "scene" and "n_boxes" in val:
                    val["n_boxes"] = tuple(val["n_boxes"])
                d[key] = typ(**val)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def resolve_seed(cfg: RunConfig, flag: Optional[int] = None) -> int:
    """Flag beats environment beats config file."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        return int(env)
    return int(cfg.seed)
