"""Flat ``key = value`` run configuration with dotted namespaces.

Lines look like ``rl.utd = 4`` or ``env.name = point_reach``; ``#`` starts a
comment.  Values are parsed by the type of the key's default, so unknown
keys and malformed values fail loudly.  A few short aliases map to their
namespaced key (``utd`` -> ``rl.utd``, ``algo`` -> ``run.algo``, ...).
"""

from __future__ import annotations

from dataclasses import fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, Optional

from .core import TrainConfig
from .exceptions import ConfigError

ENV_CHUNK = {"point_reach": 8, "arm_pick_place": 16}

# (default, kind); kind drives parsing and formatting
_KEYS = {
    "seed": (0, int),
    "env.name": ("point_reach", str),
    "demos.count": (30, int),
    "demos.noise": (0.3, float),
    "demos.path": ("demos.jsonl", str),
    "bc.chunk_size": (None, int),
    "bc.epochs": (100, int),
    "bc.lr": (1e-3, float),
    "bc.hidden": ((256, 256), tuple),
    "bc.batch_size": (256, int),
    "bc.requery_every_step": (False, bool),
    "bc.path": ("bc.json", str),
    "bc.eval_episodes": (100, int),
    "run.out_dir": ("runs/default", str),
    "run.algo": ("resfit", str),
    "run.split_mode": (False, bool),
    "run.lockstep": (False, bool),
    "run.learner_enabled": (True, bool),
    "filtered_bc.rounds": (5, int),
    "filtered_bc.rollouts_per_round": (100, int),
    "filtered_bc.epochs_per_round": (30, int),
    "eval.episodes": (100, int),
    "eval.pairs": (200, int),
    "eval.seed": (0, int),
    "ablate.threshold": (0.5, float),
    "ablate.seeds": ((0, 1, 2), tuple),
    "log.wallclock": (False, bool),
}

_TRAIN_KINDS = {"utd": Fraction, "actor_hidden": tuple, "critic_hidden": tuple,
                "stop_success": float, "warmup_noise_scale": float, "smoothing_sigma": float,
                "smoothing_clip": float, "explore_sigma": float}
for _f in fields(TrainConfig):
    if _f.name == "seed":
        continue
    _default = _f.default
    _kind = _TRAIN_KINDS.get(_f.name, type(_default))
    _KEYS[f"rl.{_f.name}"] = (_default, _kind)

ALIASES = {
    "utd": "rl.utd",
    "n_step": "rl.n_step",
    "residual_mode": "rl.residual_mode",
    "use_layernorm": "rl.critic_layernorm",
    "demos_in_buffer": "rl.demos_in_buffer",
    "algo": "run.algo",
    "split_mode": "run.split_mode",
    "lockstep": "run.lockstep",
}

CHOICES = {"run.algo": ("resfit", "filtered_bc"),
           "rl.residual_mode": ("residual", "full_action"),
           "env.name": tuple(ENV_CHUNK)}


def canonical(key: str) -> str:
    key = ALIASES.get(key.strip(), key.strip())
    if key not in _KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def parse_value(key: str, text: str):
    default, kind = _KEYS[key]
    text = text.strip()
    if text.lower() in ("none", "null", ""):
        if default is None or key in ("rl.stop_success",):
            return None
        raise ConfigError(f"{key} may not be empty")
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            value = low in ("true", "1", "yes")
        elif kind is tuple:
            value = tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        elif kind is Fraction:
            value = Fraction(text)
        else:
            value = kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {', '.join(CHOICES[key])}")
    return value


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


class RunConfig:
    """Resolved key/value settings for one command invocation."""

    def __init__(self, values: Optional[Dict[str, object]] = None):
        self.values = {k: d for k, (d, _) in _KEYS.items()}
        for k, v in (values or {}).items():
            self.values[canonical(k)] = v

    def __getitem__(self, key):
        return self.values[canonical(key)]

    def set(self, key: str, text: str) -> None:
        key = canonical(key)
        self.values[key] = parse_value(key, text)

    def apply(self, overrides: Iterable[str]) -> "RunConfig":
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, text = item.split("=", 1)
            self.set(key, text)
        return self

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.parse(path.read_text(), str(path))

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'key = value'")
            key, value = line.split("=", 1)
            try:
                cfg.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{n}: {exc}") from None
        return cfg

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.values.items()))

    def copy(self) -> "RunConfig":
        return RunConfig(dict(self.values))

    @property
    def chunk_size(self) -> int:
        k = self.values["bc.chunk_size"]
        return ENV_CHUNK[self.values["env.name"]] if k is None else k

    @property
    def out_dir(self) -> Path:
        return Path(self.values["run.out_dir"])

    def path(self, key: str) -> Path:
        """Relative paths live under the run's output directory."""
        p = Path(self[key])
        return p if p.is_absolute() else self.out_dir / p

    def train_config(self) -> TrainConfig:
        kw = {k[3:]: v for k, v in self.values.items() if k.startswith("rl.")}
        kw["utd"] = float(kw["utd"])
        try:
            return replace(TrainConfig(), seed=self.values["seed"], **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
