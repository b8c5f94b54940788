"""Layered run configuration: defaults < JSON file < ``MEG_*`` environment < command-line flags."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, get_args, get_origin, get_type_hints

from meg.gnn import TrainConfig
from meg.rl import EpisodeConfig
from meg.similarity import FingerprintConfig, SimilarityWeights

ENV_PREFIX = "MEG_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    task: str | None = None
    n_classes: int = 2
    smiles_column: str = "smiles"
    label_column: str = "label"
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    # predictor
    hidden_size: int = 256
    batch_size: int = 20
    learning_rate: float = 1e-3
    epochs: int = 200
    patience: int = 30
    dropout: float = 0.1
    # generator
    max_steps: int = 1
    include_noop: bool = False
    gamma: float = 0.9
    epsilon0: float = 1.0
    decay_lambda: float = 0.9987
    decaying_policy: bool = True
    train_epochs: int = 3000
    top_k: int = 10
    alpha: float = 0.5
    alpha_tanimoto: float = 0.5
    alpha_cosine: float = 0.5
    fp_radius: int = 2
    fp_width: int = 2048
    vocab: tuple[str, ...] = ("C", "N", "O")
    q_hidden: tuple[int, ...] = (1024, 512, 128)
    q_learning_rate: float = 1e-4
    replay_capacity: int = 5000
    q_batch_size: int = 64
    target_sync: int = 20
    workers: int = 1
    target: float | None = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            hidden_size=self.hidden_size,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            patience=self.patience,
            dropout=self.dropout,
            seed=self.seed,
        )

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(
            max_steps=self.max_steps,
            include_noop=self.include_noop,
            gamma=self.gamma,
            epsilon0=self.epsilon0,
            decay_lambda=self.decay_lambda,
            decaying_policy=self.decaying_policy,
            train_epochs=self.train_epochs,
            top_k=self.top_k,
            alpha=self.alpha,
            similarity_weights=SimilarityWeights(self.alpha_tanimoto, self.alpha_cosine),
            fingerprint=FingerprintConfig(self.fp_radius, self.fp_width),
            vocab=self.vocab,
            q_hidden=self.q_hidden,
            q_learning_rate=self.q_learning_rate,
            replay_capacity=self.replay_capacity,
            batch_size=self.q_batch_size,
            target_sync=self.target_sync,
            seed=self.seed,
            workers=self.workers,
        )

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)

    def validate(self) -> "RunConfig":
        """Build every derived config once so bad values fail before any work starts."""
        try:
            self.train_config()
            self.episode_config()
            if self.task not in (None, "classification", "regression"):
                raise ValueError(f"task must be classification or regression, got {self.task!r}")
            fr = self.fractions
            if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
                raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")
            for name in ("hidden_size", "batch_size", "epochs", "n_classes"):
                if getattr(self, name) < 1:
                    raise ValueError(f"{name} must be positive")
            if not 0.0 <= self.dropout < 1.0:
                raise ValueError("dropout must lie in [0, 1)")
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


_HINTS = get_type_hints(RunConfig)
KEYS = tuple(f.name for f in fields(RunConfig))


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _as_int(value: Any) -> int:
    if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
        raise ValueError(f"not an integer: {value!r}")
    return int(value)


_SCALARS = {bool: _as_bool, int: _as_int, float: float, str: str}


def coerce(key: str, value: Any) -> Any:
    """Convert a raw value (string from env/flags, or JSON) to the declared type of ``key``."""
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    hint = _HINTS[key]
    args = get_args(hint)
    try:
        if type(None) in args:
            if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
                return None
            hint = next(a for a in args if a is not type(None))
            args = get_args(hint)
        if value is None:
            raise ValueError("null not allowed")
        if get_origin(hint) is tuple:
            items = value.split(",") if isinstance(value, str) else list(value)
            return tuple(_SCALARS[args[0]](str(v).strip()) for v in items if str(v).strip())
        return _SCALARS[hint](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def from_mapping(base: RunConfig, values: Mapping[str, Any]) -> RunConfig:
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return replace(base, **{k: coerce(k, v) for k, v in values.items()})


def env_values(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX) :].lower()
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r} from environment variable {name}")
            out[key] = value
    return out


def load_config(
    path: str | Path | None = None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = from_mapping(cfg, data)
    cfg = from_mapping(cfg, env_values(environ))
    cfg = from_mapping(cfg, {k: v for k, v in (flags or {}).items() if v is not None})
    return cfg.validate()
