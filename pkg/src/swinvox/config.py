"""Run configuration and its line-oriented ``key = value`` file format.

A config file has up to three sections::

    [encoder]
    preset = desk
    attention = v1-bias-table

    [decoder]
    preset = desk

    [train]
    preset = desk
    dataset = data/
    lr = 1e-4

``preset`` picks the base values; other keys override single fields.
Unknown sections or keys are errors. Sequences are comma-separated.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError

SEED_ENV = "R3DS_SEED"
PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 0  # steps between checkpoints; 0 keeps only the final one
    dataset: str = "data"
    max_steps: int = 0  # 0 means epochs * steps-per-epoch
    threshold: float = 0.3
    distance: float = 0.01
    validate_every_epoch: bool = True

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = dict(lr=1e-4, beta1=0.9, beta2=0.999, weight_decay=1e-2, epochs=300, batch_size=16)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr and weight decay must be non-negative, eps positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 0 or self.max_steps < 0:
            raise ConfigError("epochs and batch size must be positive; cadence and max steps non-negative")
        if not 0 < self.threshold < 1 or self.distance <= 0:
            raise ConfigError("threshold must lie in (0, 1) and distance be positive")
        return self


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    decoder: DecoderConfig = field(default_factory=DecoderConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig.desk)

    def validate(self) -> "RunConfig":
        self.encoder.validate()
        self.decoder.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict(),
                "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]), TrainConfig(**d["train"]))

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))


_SECTIONS = {"encoder": EncoderConfig, "decoder": DecoderConfig, "train": TrainConfig}


def _coerce(cls, key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    default = fields[key].default
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {cls.__name__}.{key}: {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    built = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
    for section, cls in _SECTIONS.items():
        items = dict(parser.items(section)) if parser.has_section(section) else {}
        preset = items.pop("preset", "desk").strip()
        if preset not in PRESETS:
            raise ConfigError(f"{source}: unknown {section} preset {preset!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        overrides = {}
        for key, raw in items.items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            overrides[key] = _coerce(cls, key, raw)
        built[section] = getattr(cls, preset)(**overrides)
    return RunConfig(**built).validate()


def load_config(path: Optional[str] = None, env: Optional[dict] = None) -> RunConfig:
    """Read a config file (or the desk defaults) and apply the seed override."""
    if path is None:
        run = RunConfig().validate()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        run = parse_config(text, source=str(path))
    return apply_env(run, env)


def apply_env(run: RunConfig, env: Optional[dict] = None) -> RunConfig:
    """Apply the ``R3DS_SEED`` override, if set."""
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            run = run.with_seed(int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return run


def dump_config(run: RunConfig) -> str:
    lines = []
    for section, obj in (("encoder", run.encoder), ("decoder", run.decoder), ("train", run.train)):
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
