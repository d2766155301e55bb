"""Experiment configuration: one JSON file gathering the file paths and the
per-module settings that a full retargeting run needs.

The file is a flat object with a handful of path/identity fields plus one
nested object per module section (``ppo``, ``update``, ``box``, ``sim``,
``loss``, ``metrics``).  Omitted sections and omitted keys inside a section
fall back to the dataclass defaults, so a minimal config only names its input
files.  Parsing is strict: unknown keys raise instead of being ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bilevel import ConstraintBox, UpdateConfig
from .objective import LossWeights, RewardConfig, downstream_reward, retargeting_reward
from .simcore import SimConfig
from .trainer import PPOConfig

__all__ = [
    "ConfigError",
    "ContactThresholds",
    "ExperimentConfig",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "save_config",
    "resolve_reward",
]


class ConfigError(ValueError):
    """Raised when a configuration file cannot be parsed or validated."""


@dataclass(frozen=True)
class ContactThresholds:
    """Height/velocity gates for estimating foot contact in source clips."""

    height_m: float = 0.05
    velocity_ms: float = 0.15

    def __post_init__(self):
        if self.height_m <= 0.0 or self.velocity_ms <= 0.0:
            raise ValueError("contact thresholds must be positive")


REWARD_PRESETS = {
    "retargeting": retargeting_reward,
    "downstream": downstream_reward,
}


@dataclass
class ExperimentConfig:
    """Paths and settings for one retargeting experiment."""

    source_morphology: str = ""
    target_morphology: str = ""
    correspondences: str = ""
    calibration: str = ""
    clips: list[str] = field(default_factory=list)
    out_dir: str = "out"
    seed: int = 0
    bilevel: bool = True
    reward_preset: str = "retargeting"
    reward_overrides: dict[str, float] = field(default_factory=dict)
    checkpoint_every: int = 0
    log_every: int = 1
    ppo: PPOConfig = field(default_factory=PPOConfig)
    update: UpdateConfig = field(default_factory=UpdateConfig)
    box: ConstraintBox = field(default_factory=ConstraintBox)
    sim: SimConfig = field(default_factory=SimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    metrics: ContactThresholds = field(default_factory=ContactThresholds)

    def __post_init__(self):
        if self.reward_preset not in REWARD_PRESETS:
            raise ConfigError(
                f"unknown reward preset {self.reward_preset!r}; "
                f"expected one of {sorted(REWARD_PRESETS)}"
            )
        if self.checkpoint_every < 0 or self.log_every < 1:
            raise ConfigError("checkpoint_every must be >= 0 and log_every >= 1")

    # -- validation ---------------------------------------------------------

    def validate_inputs(self, *, need_calibration: bool = False) -> None:
        """Check that every input file this experiment reads exists.

        The calibration file is produced by the calibrate step, so it is only
        required when ``need_calibration`` is set.
        """
        required = {
            "source_morphology": self.source_morphology,
            "target_morphology": self.target_morphology,
            "correspondences": self.correspondences,
        }
        if need_calibration:
            required["calibration"] = self.calibration
        for name, path in required.items():
            if not path:
                raise ConfigError(f"config field {name!r} is empty")
            if not Path(path).is_file():
                raise ConfigError(f"{name}: no such file: {path}")
        if not self.clips:
            raise ConfigError("config lists no motion clips")
        for p in self.clips:
            if not Path(p).is_file():
                raise ConfigError(f"clips: no such file: {p}")
        if not self.calibration:
            raise ConfigError("config field 'calibration' is empty")


def resolve_reward(cfg: ExperimentConfig) -> RewardConfig:
    """Build the reward configuration from the preset plus any overrides."""
    reward = REWARD_PRESETS[cfg.reward_preset]()
    for name, value in cfg.reward_overrides.items():
        try:
            reward = reward.replace_weight(name, float(value))
        except ValueError as exc:
            raise ConfigError(f"reward_overrides: {exc}") from exc
    return reward


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_SECTIONS = {
    "ppo": PPOConfig,
    "update": UpdateConfig,
    "box": ConstraintBox,
    "sim": SimConfig,
    "loss": LossWeights,
    "metrics": ContactThresholds,
}


def _section_to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _section_from_dict(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = {
        "source_morphology": cfg.source_morphology,
        "target_morphology": cfg.target_morphology,
        "correspondences": cfg.correspondences,
        "calibration": cfg.calibration,
        "clips": list(cfg.clips),
        "out_dir": cfg.out_dir,
        "seed": cfg.seed,
        "bilevel": cfg.bilevel,
        "reward_preset": cfg.reward_preset,
        "reward_overrides": dict(cfg.reward_overrides),
        "checkpoint_every": cfg.checkpoint_every,
        "log_every": cfg.log_every,
    }
    for name in _SECTIONS:
        d[name] = _section_to_dict(getattr(cfg, name))
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a JSON object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if k in _SECTIONS:
            kwargs[k] = _section_from_dict(_SECTIONS[k], v, k)
        else:
            kwargs[k] = v
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
