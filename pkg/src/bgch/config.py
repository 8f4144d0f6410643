"""Training configuration, config-file loading and named RNG streams."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

import numpy as np

from .estimators import EstimatorSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ABLATIONS = ("no_fd", "no_ah_ta", "no_ah_rf", "learnable_factors", "no_bpr", "no_rec")

# Each consumer of randomness gets its own stream so toggling one feature
# never shifts another's draws.
STREAMS = {"init": 1, "dispersion": 2, "sampling": 3, "split": 4, "eval": 5, "landscape": 6}


class ConfigError(ValueError):
    pass


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    layers: int = 2
    disp_iters: int = 1
    epsilon: float = 0.1
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    lambda1: float = 1.0
    lambda2: float = 1e-4
    lr: float = 1e-2
    batch_size: int = 2048
    negatives: int = 1
    epochs: int = 50
    seed: int = 0
    ablations: frozenset = frozenset()
    init_std: float = 0.1
    test_ratio: float = 0.2
    patience: int = 10
    eval_n: int = 20
    freeze_p0: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ablations", frozenset(self.ablations))
        unknown = self.ablations - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation(s): {', '.join(sorted(unknown))}")
        if {"no_bpr", "no_rec"} <= self.ablations:
            raise ConfigError("no_bpr and no_rec together leave no objective")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.dim < 1 or self.layers < 0 or self.disp_iters < 0:
            raise ConfigError("dim >= 1, layers >= 0, disp_iters >= 0 required")
        if self.disp_iters > self.layers:
            raise ConfigError(f"disp_iters K={self.disp_iters} must not exceed layers L={self.layers}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in [0, 1)")
        if self.batch_size < 1 or self.negatives < 1 or self.epochs < 0:
            raise ConfigError("batch_size >= 1, negatives >= 1, epochs >= 0 required")

    @property
    def effective_epsilon(self) -> float:
        return 0.0 if "no_fd" in self.ablations else self.epsilon

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "estimator":
                out.update({f"estimator.{k}": x for k, x in dataclasses.asdict(v).items()})
            elif f.name == "ablations":
                out["ablations"] = sorted(v)
            else:
                out[f.name] = v
        return out


# config-file key -> (TrainConfig field | estimator field)
_ESTIMATOR_KEYS = {
    "estimator": "kind",
    "fourier.n": "n",
    "fourier.H": "H",
    "fourier.n_mode": "n_mode",
    "ste.clip": "ste_clip",
    "tanh.temperature": "tanh_temperature",
    "sigmoid.temperature": "sigmoid_temperature",
    "signswish.beta": "signswish_beta",
}
_FIELD_ALIASES = {"L": "layers", "K": "disp_iters", "d": "dim", "c": "dim", "batch": "batch_size",
                  "neg_samples": "negatives", "ablation": "ablations"}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Apply flat ``key -> value`` overrides (dotted estimator keys allowed)."""
    base = base or TrainConfig()
    names = {f.name for f in dataclasses.fields(TrainConfig)} - {"estimator"}
    top, est = {}, {}
    for key, val in _flatten(values).items():
        if key in _ESTIMATOR_KEYS:
            est[_ESTIMATOR_KEYS[key]] = val
        elif key.startswith("estimator.") and key[10:] in {f.name for f in dataclasses.fields(EstimatorSpec)}:
            est[key[10:]] = val
        else:
            name = _FIELD_ALIASES.get(key, key)
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            top[name] = val
    if "ablations" in top:
        a = top["ablations"]
        top["ablations"] = frozenset([a] if isinstance(a, str) else a)
    try:
        spec = dataclasses.replace(base.estimator, **est) if est else base.estimator
        return dataclasses.replace(base, estimator=spec, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read a ``key = value`` TOML config file."""
    with open(path, "rb") as fh:
        try:
            values = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_mapping(values, base)
