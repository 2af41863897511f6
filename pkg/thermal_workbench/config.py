"""
Run configuration: one dataclass per section, loaded from a YAML document.

Defaults describe a single ~10-person office zone at 15-minute resolution;
unknown sections or keys are rejected.
"""

import os
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import torch
import yaml

from .errors import InputError
from .models import ModelConfig
from .plant import PlantParams


@dataclass
class PlantConfig:
    C_z: float = 3e6
    C_m: float = 4e7
    R_mz: float = 2e-3
    R_oz: float = 8e-3
    R_om: float = 8e-3
    a_sol: float = 2.0
    q_occ: float = 120.0
    noise_sigma: float = 0.05
    dt: float = 900.0
    q_extra: float = 0.0
    days: int = 30
    start: str = "2024-06-01"

    def params(self) -> PlantParams:
        names = {f.name for f in fields(PlantParams)}
        return PlantParams(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class TrainingConfig:
    lr: float = 0.01
    epochs: int = 200
    patience: int = 10
    batch_size: int = 32
    p_mix: float = 0.5
    stride: int = 8
    val_stride: int = 4
    val_fraction: float = 0.2
    schedule: str = "interleaved"  # or "sequential"
    phase1_epochs: int = 20

    def __post_init__(self):
        if self.schedule not in ("interleaved", "sequential"):
            raise InputError(f"training.schedule must be 'interleaved' or 'sequential', got {self.schedule!r}")
        if not 0.0 <= self.p_mix <= 1.0:
            raise InputError(f"training.p_mix must lie in [0, 1], got {self.p_mix}")
        for name in ("epochs", "patience", "batch_size"):
            if getattr(self, name) < 1:
                raise InputError(f"training.{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class EvaluationConfig:
    check_levels: List[float] = field(default_factory=lambda: [-4.0, -2.0, 0.0, 2.0, 4.0])
    u_limit_kw: float = 10.0
    rolling_stride: int = 1
    trv_stride: int = 96
    test_days: int = 31
    training_days: List[int] = field(default_factory=lambda: [7, 30, 90])
    seeds: int = 5
    variants: List[str] = field(default_factory=lambda: ["LSTM", "PI-ModNN|LC", "PI-ModNN|L", "PI-ModNN|C", "PI-ModNN"])
    mae_threshold: float = 0.5
    epsilon: float = 1e-6
    audit_points: int = 1000
    jobs: int = 1


@dataclass
class ControlConfig:
    lr: float = 1e-4
    batch_size: int = 2048
    tau: float = 0.05
    gamma: float = 0.98
    episode_len: int = 192
    max_epochs: int = 1000
    episodes: int = 200
    hidden: int = 64
    hidden_layers: int = 2
    buffer_capacity: int = 200_000
    start_steps: int = 2000
    auto_entropy: bool = True
    alpha: float = 0.2
    hybrid_episodes: int = 5
    eval_days: int = 14
    r1: float = -0.1
    r2_q_sup: float = -0.01
    r2_q_out: float = -0.01
    r2_t_sup: float = -0.033
    r3: float = -1e-4
    r4: float = -2.5e-5
    r5: float = 0.04
    r6: float = -1e-3
    occupied_start_h: float = 6.0
    occupied_end_h: float = 18.0
    q_sup_min_occupied: float = 0.09
    q_sup_min_unoccupied: float = 0.0
    q_sup_max: float = 0.28
    t_sup_min: float = 12.8
    t_sup_max: float = 32.2
    comfort_occupied: List[float] = field(default_factory=lambda: [21.7, 24.0])
    comfort_unoccupied: List[float] = field(default_factory=lambda: [18.3, 26.7])

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise InputError(f"control.tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise InputError(f"control.gamma must lie in [0, 1), got {self.gamma}")
        if self.episodes > self.max_epochs:
            raise InputError(f"control.episodes ({self.episodes}) exceeds max_epochs ({self.max_epochs})")


@dataclass
class IoConfig:
    output_dir: str = "runs"
    telemetry: str = ""


SECTIONS = {
    "plant": PlantConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "evaluation": EvaluationConfig,
    "control": ControlConfig,
    "io": IoConfig,
}


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


@dataclass
class RunConfig:
    seed: int = 42
    plant: PlantConfig = field(default_factory=PlantConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RunConfig":
        doc = dict(doc or {})
        unknown = doc.keys() - set(SECTIONS) - {"seed"}
        if unknown:
            raise InputError(f"unknown config sections {sorted(unknown)}; valid: {sorted(SECTIONS)} and seed")
        kwargs: Dict[str, Any] = {"seed": int(doc.get("seed", 42))}
        for name, section_cls in SECTIONS.items():
            values = doc.get(name) or {}
            if not isinstance(values, dict):
                raise InputError(f"config section {name} must be a mapping")
            valid = {f.name for f in fields(section_cls)}
            bad = values.keys() - valid
            if bad:
                raise InputError(f"unknown keys {sorted(bad)} in section {name}; valid: {sorted(valid)}")
            kwargs[name] = section_cls(**values)
        return cls(**kwargs)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise InputError(f"config is not valid YAML: {e}") from None
        return cls.from_dict(doc or {})


def apply_overrides(doc: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply ``section.key=value`` strings (or ``seed=value``); values use YAML scalar syntax."""
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (doc or {}).items()}
    for item in overrides:
        if "=" not in item:
            raise InputError(f"override {item!r} is not of the form section.key=value")
        path, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        if path == "seed":
            doc["seed"] = value
            continue
        if "." not in path:
            raise InputError(f"override {item!r} needs a section prefix, e.g. training.lr=0.01")
        section, key = path.split(".", 1)
        doc.setdefault(section, {})
        if not isinstance(doc[section], dict):
            raise InputError(f"config section {section} must be a mapping")
        doc[section][key] = value
    return doc


def load_config(path=None, overrides: List[str] = ()) -> RunConfig:
    doc: Dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise InputError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise InputError(f"config {p} is not valid YAML: {e}") from None
    return RunConfig.from_dict(apply_overrides(doc, list(overrides)))


def set_global_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    os.environ["PYTHONHASHSEED"] = str(seed)
    torch.manual_seed(seed)
