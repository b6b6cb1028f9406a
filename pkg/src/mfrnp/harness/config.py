"""Experiment configuration: presets, profiles and file loading."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from mfrnp.errors import ConfigurationError
from mfrnp.multifidelity import TrainConfig

RESOLUTION_LADDER = {2: (16, 32), 3: (16, 32, 64), 5: (16, 32, 64, 96, 128)}

PRESETS = {
    "heat2": ("heat", 2),
    "heat3": ("heat", 3),
    "heat5": ("heat", 5),
    "poisson2": ("poisson", 2),
    "poisson3": ("poisson", 3),
    "poisson5": ("poisson", 5),
}

PROFILES = {
    "desk": {"max_epochs": 5000, "patience": 1000},
    "paper": {"max_epochs": 50000, "patience": 10000},
}

N_LOWER = 100
N_TOP = 32
N_TEST = 128


@dataclass
class ExperimentConfig:
    task: str = "heat"
    K: int = 2
    regime: str = "full"
    resolutions: list | None = None
    n_train: list | None = None
    n_test: int = N_TEST
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: list | None = None
    metrics: list = field(default_factory=lambda: ["nrmse"])
    out_dir: str | None = None
    seed: int = 0
    seeds: list | None = None
    profile: str = "desk"
    hidden: int = 32
    depth: int = 3
    eval_samples: int = 10
    baseline: bool = True
    images: int = 4

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if self.task not in ("heat", "poisson"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.regime not in ("full", "ood"):
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if self.K < 2:
            raise ConfigurationError("a multi-fidelity experiment needs K >= 2")
        if self.resolutions is None:
            if self.K not in RESOLUTION_LADDER:
                raise ConfigurationError(f"no default resolutions for K = {self.K}; set them explicitly")
            self.resolutions = list(RESOLUTION_LADDER[self.K])
        self.resolutions = [int(r) for r in self.resolutions]
        if len(self.resolutions) != self.K:
            raise ConfigurationError("need one resolution per fidelity")
        if any(b < a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ConfigurationError("resolutions must ascend with fidelity")
        if self.n_train is None:
            self.n_train = [N_LOWER] * (self.K - 1) + [N_TOP]
        self.n_train = [int(n) for n in self.n_train]
        if len(self.n_train) != self.K or min(self.n_train) < 2:
            raise ConfigurationError("need >= 2 training samples at every fidelity")
        if self.n_test < 2:
            raise ConfigurationError("need >= 2 test samples")
        unknown = set(self.metrics) - {"nrmse"}
        if unknown:
            raise ConfigurationError(f"unknown metrics {sorted(unknown)}")

    def to_dict(self):
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def apply_profile(train, profile):
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}")
    d = train.to_dict()
    d.update(PROFILES[profile])
    return TrainConfig.from_dict(d)


def build_config(base=None, overrides=None, preset=None):
    """Merge preset, file values and overrides (in that priority order, last wins).

    ``overrides`` may contain ``train`` sub-keys either nested or as
    ``train.<key>``.  The profile sets epoch budgets unless the file or the
    overrides set them explicitly.
    """
    data = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}")
        data["task"], data["K"] = PRESETS[preset]
    for layer in (base or {}), (overrides or {}):
        for key, value in layer.items():
            if value is None:
                continue
            if key.startswith("train."):
                data.setdefault("train", {})[key[6:]] = value
            elif key == "train":
                data.setdefault("train", {}).update(value)
            else:
                data[key] = value
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    profile = data.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}")
    train = dict(PROFILES[profile])
    train.update(data.get("train", {}))
    data["train"] = TrainConfig.from_dict(train)
    return ExperimentConfig(**data)


def load_config_file(path):
    """Read a YAML (or JSON) mapping."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must contain a mapping")
    return data
