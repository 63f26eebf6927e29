"""Experiment configuration: one flat dataclass, read from and written to JSON."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace

SEED_ENV = "DGSL_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # model
    hidden_dim: int = 32
    state_dim: int = 16
    n_layers: int = 1
    n_features: int = 64  # random features m
    tau: float = 0.25
    gumbel: bool = True
    lambda_merge: float = 0.05
    k_inter: int = -1  # top-k inter pairs per snapshot; -1 means |E^(t-1)|
    chunk_size: int = 0  # 0 = sequential scan
    time_encoding: str = "relative"  # "relative" (lag to newest snapshot), "absolute" or "none"
    attention: str = "kernel"  # "kernel" (random features) or "exact" (dense softmax baseline)
    # objective
    beta1: float = 0.25
    beta2: float = 50.0
    mu: float = 1.0
    # optimization
    lr: float = 1e-2
    max_epochs: int = 1000
    patience: int = 50
    # temporal split (snapshot counts)
    train_len: int = 6
    val_len: int = 1
    test_len: int = 1

    def __post_init__(self):
        checks = {
            "hidden_dim": self.hidden_dim >= 2 and self.hidden_dim % 2 == 0,
            "state_dim": self.state_dim >= 1,
            "n_layers": self.n_layers >= 1,
            "n_features": self.n_features >= 1,
            "tau": self.tau > 0,
            "lambda_merge": self.lambda_merge >= 0,
            "beta1": self.beta1 >= 0,
            "beta2": self.beta2 >= 0,
            "mu": self.mu >= 0,
            "lr": self.lr > 0,
            "max_epochs": self.max_epochs >= 1,
            "patience": self.patience >= 1,
            "chunk_size": self.chunk_size >= 0,
            "train_len": self.train_len >= 2,
            "val_len": self.val_len >= 1,
            "test_len": self.test_len >= 1,
            "attention": self.attention in ("kernel", "exact"),
            "time_encoding": self.time_encoding in ("relative", "absolute", "none"),
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ConfigError(f"invalid config values: {', '.join(f'{k}={getattr(self, k)!r}' for k in bad)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        out = {}
        for k, v in d.items():
            default = known[k].default
            if isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ConfigError(f"{k} must be a boolean, got {v!r}")
            elif isinstance(default, int):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{k} must be an integer, got {v!r}")
            elif isinstance(default, str):
                if not isinstance(v, str):
                    raise ConfigError(f"{k} must be a string, got {v!r}")
            elif isinstance(default, float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{k} must be a number, got {v!r}")
                v = float(v)
            out[k] = v
        return cls(**out)

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(doc)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)


def apply_seed_override(cfg: ExperimentConfig, env=None) -> ExperimentConfig:
    """Replace the seed with $DGSL_SEED when it is set."""
    env = os.environ if env is None else env
    raw = env.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        return cfg.with_(seed=int(raw))
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
