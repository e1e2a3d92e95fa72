"""Flat ``key = value`` run configuration covering model, training, task and evaluation."""
from __future__ import annotations

import types
import typing
from dataclasses import dataclass, fields

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    L: int = 32
    M: int = 8
    M_noise: int | None = None
    boundary_factor: float = 2.0
    decoder_hidden: tuple[int, ...] = ()
    C: int | None = None
    condition_noise: bool = False
    cell_time: bool = False
    delta: float = 0.1
    noise_mode: str = "learned"
    fixed_noise_sd: float = 0.1
    # training
    max_iterations: int = 10_000
    learning_rate: float = 1e-3
    batch_per_time: int = 256
    lr_decay_factor: float = 0.5
    lr_patience_iterations: int = 200
    validation_fraction: float = 0.05
    validation_times: int = 3
    early_stop_patience: int = 1000
    blur: float = 0.05
    scaling: float = 0.5
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 100
    sinkhorn_unroll: bool = False
    val_every: int = 10
    data_init: bool = True
    init_whiten: str = "per-time"
    # task and data
    task: str = "custom"
    heldout: tuple[int, ...] = ()
    identity: str | None = None
    normalize: bool = False
    # evaluation
    n_generate: int = 2000
    n_seeds: int = 5

    def model_config(self, G: int) -> ModelConfig:
        keys = {f.name for f in fields(ModelConfig)} - {"G", "category_kernel"}
        return ModelConfig(G=G, **{k: getattr(self, k) for k in keys})

    def train_config(self, seed: int) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)} - {"seed", "log_every", "adam_beta1",
                                                       "adam_beta2", "adam_eps"}
        return TrainConfig(seed=seed, **{k: getattr(self, k) for k in keys})

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _parse(raw, inner, key)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported type {tp}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    hints = typing.get_type_hints(RunConfig)
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in hints:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        values[key] = _parse(raw, hints[key], key)
    cfg = RunConfig(**values)
    try:
        cfg.model_config(G=1)
        cfg.train_config(seed=0)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
