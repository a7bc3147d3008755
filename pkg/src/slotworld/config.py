"""Run configuration: a strict JSON document with per-command sections.

Every section is validated field-by-field before any compute; unknown keys
are rejected. One root seed feeds hierarchical seed derivation for every
component, so a (config, seed) pair pins the whole pipeline.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .model import ModelConfig
from .planning import CEMConfig
from .training import TrainConfig
from .world import WorldConfig

KNOWN_SECTIONS = {"seed", "world", "generate", "model", "train", "cem", "eval"}


@dataclass(frozen=True)
class GenerateConfig:
    n_trajectories: int = 500
    horizon: int = 2
    with_gt: bool = True
    filename: str = "dataset.bwds"

    def __post_init__(self):
        if self.n_trajectories < 1 or self.horizon < 0:
            raise ValueError("need n_trajectories >= 1 and horizon >= 0")

    @staticmethod
    def from_dict(d: dict) -> "GenerateConfig":
        known = {f.name for f in dataclasses.fields(GenerateConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generate keys: {sorted(unknown)}")
        return GenerateConfig(**d)


@dataclass(frozen=True)
class EvalConfig:
    n_scenes: int = 100
    n_episodes: int = 50
    tol: float = 4.0
    metric: str = "masked_iou"
    cost_mode: str = "greedy"
    action_space: str = "entity"
    m0: int = 4
    mt: int = 2
    k_slots: Optional[int] = None  # override at evaluation time (symmetric only)
    pick_samples: int = 512
    satisfied_cost: float = 0.5
    dataset: Optional[str] = None  # segmentation dataset path

    def __post_init__(self):
        if self.metric not in ("l2_subimage", "masked_iou"):
            raise ValueError("metric must be l2_subimage or masked_iou")
        if self.cost_mode not in ("full", "greedy", "unfactorized"):
            raise ValueError("cost_mode must be full, greedy, or unfactorized")
        if self.action_space not in ("xy", "entity"):
            raise ValueError("action_space must be xy or entity")

    @staticmethod
    def from_dict(d: dict) -> "EvalConfig":
        known = {f.name for f in dataclasses.fields(EvalConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown eval keys: {sorted(unknown)}")
        return EvalConfig(**d)


def _model_from_section(d: dict) -> ModelConfig:
    d = dict(d)
    preset = d.pop("preset", None)
    if preset is None:
        return ModelConfig.from_dict(d)
    if preset != "desk":
        raise ValueError(f"unknown model preset {preset!r}")
    base = ModelConfig.desk()
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
    return dataclasses.replace(base, **d)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cem: CEMConfig = field(default_factory=CEMConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train_dataset: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "world": self.world.to_dict(),
            "generate": dataclasses.asdict(self.generate),
            "model": self.model.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "model"},
            "cem": self.cem.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "train_dataset": self.train_dataset,
        }


def load_run_config(path: str | Path, seed_override: Optional[int] = None,
                    variant_override: Optional[str] = None) -> RunConfig:
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = set(raw) - KNOWN_SECTIONS - {"train_dataset"}
    if unknown:
        raise ValueError(f"{path}: unknown config sections: {sorted(unknown)}")
    seed = int(raw.get("seed", 0)) if seed_override is None else seed_override

    world_raw = dict(raw.get("world", {}))
    world_raw.setdefault("seed", seed)
    world = WorldConfig.from_dict(world_raw)

    model_raw = dict(raw.get("model", {}))
    if variant_override is not None:
        model_raw["variant"] = variant_override
    model = _model_from_section(model_raw)

    train_raw = dict(raw.get("train", {}))
    if "model" in train_raw:
        raise ValueError("the model belongs in the top-level 'model' section")
    train_raw.setdefault("seed", seed)
    train = TrainConfig.from_dict({**train_raw, "model": model.to_dict()})

    cem_raw = dict(raw.get("cem", {}))
    cem_raw.setdefault("seed", seed)
    cem = CEMConfig.from_dict(cem_raw)

    return RunConfig(
        seed=seed,
        world=world,
        generate=GenerateConfig.from_dict(raw.get("generate", {})),
        model=model,
        train=train,
        cem=cem,
        eval=EvalConfig.from_dict(raw.get("eval", {})),
        train_dataset=raw.get("train_dataset"),
    )
