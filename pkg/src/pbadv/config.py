"""Run configuration: nested dataclasses, JSON files and dotted overrides."""

import dataclasses
import json
from dataclasses import dataclass, field

from .adversarial import PerturbationConfig
from .errors import ConfigError
from .sampler import OSPConfig


@dataclass
class DataConfig:
    manifest: str = ""
    features: str = ""
    embeddings: str = ""


@dataclass
class ModelSection:
    hidden: int = 0
    embed_dim: int = 0
    dropout: float = 0.1
    freeze_words: bool = False


@dataclass
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 5e-5
    batch_size: int = 128
    epochs: int = 200
    inv_tau: float = 40.0
    seed: int = 0
    ckpt_every: int = 0
    adv_weight: float = 1.0
    select_best: bool = False

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.inv_tau <= 0:
            raise ConfigError("train.lr, train.batch_size and train.inv_tau must be positive, epochs >= 0")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")


@dataclass
class EvalConfig:
    world: str = "closed"
    grid_size: int = 200

    def validate(self):
        if self.world not in ("closed", "open"):
            raise ConfigError(f"eval.world must be 'closed' or 'open', got {self.world!r}")
        if self.grid_size < 1:
            raise ConfigError("eval.grid_size must be >= 1")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    adv: PerturbationConfig = field(default_factory=PerturbationConfig)
    osp: OSPConfig = field(default_factory=OSPConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.train.validate()
        self.eval.validate()
        # re-run per-section checks after overrides
        self.adv.__post_init__()
        self.osp.__post_init__()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


# 1/tau per benchmark; the synthetic preset is the default setup at 100 epochs
PRESETS = {
    "ut-zappos": {"train.inv_tau": 40.0},
    "mit-states": {"train.inv_tau": 20.0},
    "cgqa": {"train.inv_tau": 60.0},
    "synthetic": {"train.epochs": 100},
}


def valid_keys():
    keys = []
    for sec in dataclasses.fields(Config):
        for f in dataclasses.fields(sec.default_factory()):
            keys.append(f"{sec.name}.{f.name}")
    return keys


def _coerce(current, value, key):
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            if isinstance(current, bool) and value.lower() in ("true", "false"):
                value = value.lower() == "true"
            else:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return str(value)


def set_value(config, key, value):
    parts = key.split(".")
    if len(parts) != 2 or key not in valid_keys():
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
    section = getattr(config, parts[0])
    setattr(section, parts[1], _coerce(getattr(section, parts[1]), value, key))


def apply_overrides(config, overrides):
    """Apply ``key=value`` strings or a ``{key: value}`` mapping."""
    items = overrides.items() if isinstance(overrides, dict) else (
        o.split("=", 1) if "=" in o else (o, None) for o in overrides
    )
    for key, value in items:
        if value is None:
            raise ConfigError(f"override {key!r} must look like key=value")
        set_value(config, key.strip(), value)
    return config


def from_dict(raw):
    config = Config()
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    flat = {}
    for sec, body in raw.items():
        if isinstance(body, dict):
            for k, v in body.items():
                flat[f"{sec}.{k}"] = v
        else:
            flat[sec] = body
    preset = flat.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        apply_overrides(config, PRESETS[preset])
    apply_overrides(config, flat)
    return config.validate()


def load_config(path, overrides=()):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    config = from_dict(raw)
    apply_overrides(config, overrides)
    return config.validate()
