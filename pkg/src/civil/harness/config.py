"""Run configuration shared by every command line entry point.

A RunConfig collects each knob the other modules expose, so one JSON file
can pin an entire experiment.  Values merge in a fixed order: built-in
defaults, then a config file, then explicit command line flags.  Unknown
keys are rejected rather than ignored; a typo in a config file should stop
the run, not silently fall back to a default.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Tuple

from .. import learn, world

DATA_ROOT_ENV = "CIVIL_DATA_ROOT"


def data_root() -> Path:
    """Base directory for datasets, runs, and teleoperation episodes."""
    return Path(os.environ.get(DATA_ROOT_ENV, "civil_data"))


@dataclass
class RunConfig:
    # experiment identity
    task: str = "picking"
    method: str = "civil"
    seed: int = 0
    out: Optional[str] = None        # output directory; command-specific default
    data: Optional[str] = None       # dataset directory to load instead of generating
    model: Optional[str] = None      # checkpoint to evaluate; defaults to <out>/model.pt

    # dataset generation
    n_demos: int = 40
    n_play: int = 40
    noise_std: float = 0.005         # marker reading noise
    dropout_prob: float = 0.1        # marker dropout per frame
    action_noise: float = 0.25       # executed-action jitter during collection
    play_observations: int = 8
    validation_fraction: float = 0.1

    # training
    epochs: int = 100
    learning_rate: float = 1e-3
    lr_halving_period: int = 40
    batch_size: int = 128
    explicit_weight: float = 1.0
    causal_epochs: Optional[int] = 300
    causal_init_from_encoders: bool = True
    phase2_explicit_source: str = "all"
    play_weight: float = 2.0
    toggle_pos_weight: float = 5.0
    resume: bool = False

    # evaluation
    n_seen: int = 20
    n_unseen: int = 20
    eval_seed: int = 1000
    horizon: int = learn.EVAL_HORIZON

    # theory experiment grid
    feature_dims: Tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    mc_trials: int = 2000

    # teleoperation service
    host: str = "127.0.0.1"
    port: int = 8008
    budget_seconds: Optional[float] = None
    allow_marker_after_motion: bool = False
    teleop_mode: str = "train_correlated"
    teleop_region: str = "seen_left"
    ui_dir: Optional[str] = None     # static files served at /; autodetected

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.task not in world.TASK_NAMES:
            raise ValueError(f"task must be one of {world.TASK_NAMES}, got {self.task!r}")
        if self.method not in learn.METHODS:
            raise ValueError(f"method must be one of {learn.METHODS}, got {self.method!r}")
        if self.n_demos < 0 or self.n_play < 0:
            raise ValueError("n_demos and n_play must be non-negative")
        if self.noise_std < 0 or self.action_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if not (0.0 <= self.dropout_prob <= 1.0):
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.play_observations < 1:
            raise ValueError("play_observations must be positive")
        if self.n_seen < 0 or self.n_unseen < 0:
            raise ValueError("rollout counts must be non-negative")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if not self.feature_dims:
            raise ValueError("feature_dims grid must be non-empty")
        if any(d < 1 for d in self.feature_dims):
            raise ValueError("feature_dims must be positive")
        if self.mc_trials < 100:
            raise ValueError("mc_trials must be at least 100")
        if self.budget_seconds is not None and self.budget_seconds <= 0:
            raise ValueError("budget_seconds must be positive when given")
        if self.teleop_mode not in world.MODES:
            raise ValueError(f"teleop_mode must be one of {world.MODES}")
        if self.teleop_region not in world.REGIONS:
            raise ValueError(f"teleop_region must be one of {tuple(world.REGIONS)}")
        if not (0 < self.port < 65536):
            raise ValueError("port out of range")
        # Training-specific numeric checks live in TrainConfig; build one so
        # a bad value fails here, before any data work starts.
        self.train_config()

    def train_config(self) -> learn.TrainConfig:
        return learn.TrainConfig(
            method=self.method,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            lr_halving_period=self.lr_halving_period,
            batch_size=self.batch_size,
            validation_fraction=self.validation_fraction,
            seed=self.seed,
            explicit_weight=self.explicit_weight,
            causal_epochs=self.causal_epochs,
            causal_init_from_encoders=self.causal_init_from_encoders,
            phase2_explicit_source=self.phase2_explicit_source,
            play_weight=self.play_weight,
            toggle_pos_weight=self.toggle_pos_weight,
        )

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["feature_dims"] = list(self.feature_dims)
        return payload

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_sources(cls, *sources: dict) -> "RunConfig":
        """Merge override dicts left to right on top of the defaults.

        Every source must contain only known keys; None values are treated
        as "not set" so command line flags can default to None.
        """
        merged: dict = {}
        known = set(cls.field_names())
        for source in sources:
            unknown = sorted(set(source) - known)
            if unknown:
                raise ValueError(f"unknown config keys: {', '.join(unknown)}")
            merged.update({k: v for k, v in source.items() if v is not None})
        if "feature_dims" in merged:
            merged["feature_dims"] = tuple(int(d) for d in merged["feature_dims"])
        return cls(**merged)

    @classmethod
    def from_file(cls, path, overrides: Optional[dict] = None) -> "RunConfig":
        with open(path) as handle:
            loaded = json.load(handle)
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        return cls.from_sources(loaded, overrides or {})

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as handle:
            json.dump(self.to_dict(), handle, indent=1, sort_keys=True)
            handle.write("\n")


def default_dataset_dir(config: RunConfig) -> Path:
    return data_root() / "datasets" / f"{config.task}_seed{config.seed}"


def default_run_dir(config: RunConfig, kind: str) -> Path:
    if kind == "theory":
        return data_root() / "runs" / f"theory_seed{config.seed}"
    if kind == "serve":
        return data_root() / "teleop" / config.task
    return data_root() / "runs" / f"{kind}_{config.task}_{config.method}_seed{config.seed}"
