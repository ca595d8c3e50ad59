"""``key = value`` configuration files covering model and training settings."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

from ..blocks import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    patch_size: int = 0  # 0 picks the task default: 128 for denoising, about 64 (a multiple of the scale) for SR
    batch_size: int = 1
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    total_steps: int = 2000
    milestones: tuple = (0.5, 0.75, 0.9)
    seed: int = 0
    noise_level: float = 25.0  # on the 0-255 scale
    charbonnier_eps: float = 1e-3
    eval_every: int = 0
    checkpoint_every: int = 0

    @property
    def sigma(self) -> float:
        return self.noise_level / 255.0

    def patch_for(self, task: str) -> int:
        if self.patch_size:
            return self.patch_size
        if task == "denoise":
            return 128
        scale = int(task[2:])
        return 64 - 64 % scale

    def validate(self, task: str = "denoise") -> None:
        if self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("batch_size must be >= 1 and total_steps >= 0")
        if not 0.0 <= self.sigma < 1.0:
            raise ConfigError("noise_level must lie in [0, 255)")
        scale = 1 if task == "denoise" else int(task[2:])
        if self.patch_for(task) % scale:
            raise ConfigError(f"patch_size {self.patch_for(task)} not divisible by scale {scale}")
        if any(not 0.0 < m <= 1.0 for m in self.milestones):
            raise ConfigError("milestones are fractions of total_steps in (0, 1]")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _schema() -> dict:
    schema = {}
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            schema[f.name] = (cls, type(f.default))
    return schema


SCHEMA = _schema()


def _convert(key: str, raw: str):
    kind = SCHEMA[key][1]
    raw = raw.strip()
    try:
        if kind is bool:
            return _parse_bool(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, raw)
    return values


def parse_overrides(items) -> dict:
    values = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = (p.strip() for p in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, raw)
    return values


def build_configs(values: dict) -> tuple[ModelConfig, TrainConfig]:
    model_kw = {k: v for k, v in values.items() if SCHEMA[k][0] is ModelConfig}
    train_kw = {k: v for k, v in values.items() if SCHEMA[k][0] is TrainConfig}
    try:
        model = ModelConfig(**model_kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    train = TrainConfig(**train_kw)
    train.validate(model.task)
    return model, train


def load_config(path: str | os.PathLike | None = None, overrides=None) -> tuple[ModelConfig, TrainConfig]:
    """Read a config file (optional), then apply ``--set`` overrides, last wins."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    values.update(parse_overrides(overrides))
    return build_configs(values)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_text(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = [f"{k} = {_format(v)}" for k, v in asdict(model).items()]
    if train is not None:
        lines += [f"{k} = {_format(v)}" for k, v in asdict(train).items()]
    return "\n".join(lines) + "\n"
