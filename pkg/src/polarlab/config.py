"""Flat JSON experiment configuration.

Every key has a default; unknown keys and wrongly typed values are errors.
Defense keys left at ``None`` (``epochs``, ``lambda1``, ``splice_index``, ...)
take the per-defense default.
"""

import json
import types
import typing
from dataclasses import asdict, dataclass, fields

from . import data, nn
from .defense import DEFENDERS, DefenseConfig, default_config


class ConfigError(ValueError):
    """Invalid configuration file or override."""


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/desk"
    # dataset
    num_classes: int = 8
    n_train: int = 4000
    n_test: int = 1000
    height: int = 16
    width: int = 16
    # poisoning
    trigger: str = "patch"
    patch_size: int = 3
    blend_alpha: float = 0.2
    poison_ratio: float = 0.1
    poison_mode: str = "all2one"
    target: int = 0
    # victim training
    victim_lr: float = 0.05
    victim_momentum: float = 0.9
    victim_weight_decay: float = 5e-4
    victim_epochs: int = 30
    victim_batch_size: int = 64
    # defense
    defense: str = "a-cnpd"
    clean_fraction: float = 0.05
    lambda1: typing.Optional[float] = None
    lambda2: typing.Optional[float] = None
    lambda3: typing.Optional[float] = None
    norm: str = "2"
    rho: float = 2.0
    pgd_steps: typing.Optional[int] = None
    pgd_step_size: typing.Optional[float] = None
    epochs: typing.Optional[int] = None
    warmup_epochs: typing.Optional[int] = None
    lr: typing.Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: typing.Optional[int] = None
    d_k: int = 32
    splice_index: typing.Optional[int] = None
    polarizer_bn: str = "train"
    calibrate: bool = True
    refresh_stats: bool = True
    grad_clip: typing.Optional[float] = None
    lr_schedule: typing.Optional[str] = None
    # evaluation
    probe_size: int = 200
    risk_check: bool = True
    risk_instances: int = 100

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # derived objects ------------------------------------------------------

    def poison_spec(self):
        trig = data.Trigger(kind=self.trigger, size=self.patch_size, alpha=self.blend_alpha)
        if trig.kind == "blended":
            trig.pattern = data.default_blend_pattern((3, self.height, self.width))
        return data.PoisonSpec(trigger=trig, ratio=self.poison_ratio, mode=self.poison_mode,
                               target=self.target)

    def victim_hp(self):
        return nn.TrainHP(lr=self.victim_lr, momentum=self.victim_momentum,
                          weight_decay=self.victim_weight_decay, epochs=self.victim_epochs,
                          batch_size=self.victim_batch_size, seed=self.seed)

    def defense_config(self, name=None):
        """DefenseConfig for ``name``; keys left at ``None`` take that defense's defaults."""
        name = name or self.defense
        keys = {f.name for f in fields(DefenseConfig)}
        given = {k: v for k, v in self.to_dict().items() if k in keys and v is not None}
        given["seed"] = self.seed
        return default_config(name, **given)


_HINTS = typing.get_type_hints(ExperimentConfig)
_FIELDS = {f.name for f in fields(ExperimentConfig)}


def _check_type(key, value):
    hint = _HINTS[key]
    allowed = typing.get_args(hint) if typing.get_origin(hint) in (typing.Union, types.UnionType) \
        else (hint,)
    for t in allowed:
        if t is type(None) and value is None:
            return value
        if t is bool and isinstance(value, bool):
            return value
        if t is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if t is str and isinstance(value, str):
            return value
    names = " or ".join("null" if t is type(None) else t.__name__ for t in allowed)
    raise ConfigError(f"{key}: expected {names}, got {json.dumps(value)}")


def validate(cfg):
    """Build every derived object once so bad values fail before any stage runs."""
    if cfg.defense not in DEFENDERS:
        raise ConfigError(f"defense: unknown {cfg.defense!r}; choose from {sorted(DEFENDERS)}")
    if not 2 <= cfg.num_classes <= data.MAX_CLASSES:
        raise ConfigError(f"num_classes must lie in [2, {data.MAX_CLASSES}]")
    if not 0 < cfg.clean_fraction <= 1:
        raise ConfigError("clean_fraction must lie in (0, 1]")
    if min(cfg.n_train, cfg.n_test, cfg.height, cfg.width, cfg.probe_size) <= 0:
        raise ConfigError("dataset sizes, image extents and probe_size must be positive")
    if cfg.risk_instances < 0:
        raise ConfigError("risk_instances must be non-negative")
    try:
        cfg.poison_spec()
        hp = cfg.victim_hp()
        if min(hp.lr, hp.epochs + 1, hp.batch_size) <= 0:
            raise ValueError("victim hyperparameters must be positive")
        cfg.defense_config()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(d) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return ExperimentConfig(**{k: _check_type(k, v) for k, v in d.items()})


def load_file(path):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not text.strip():
        return {}
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def parse_override(item):
    """``key=value`` with a JSON value; bare words are taken as strings."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def parse_config(path=None, overrides=None):
    """File values (if any), then ``overrides`` on top; returns a validated config."""
    d = load_file(path) if path else {}
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    d = dict(d)
    d.update(overrides or {})
    return validate(from_dict(d))
