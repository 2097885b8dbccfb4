"""Run configuration: JSON in, validated nested dataclasses out.

A run file has six sections plus two scalars, every field optional with a
documented default; unknown keys anywhere are errors:

    model      width_preset, num_classes, use_frh, use_aux_head,
               input_channels, attention {channels, window_size, num_heads,
               cross_window_interaction, include_identity_term,
               relative_position_bias, mlp_ratio}
    loss       aux_weight, dice_eps, ignore_label
    optimizer  lr, betas, weight_decay
    schedule   epochs, batch_size, log_interval
    data       root (directory dataset) or synth {seed, count, size,
               noise_amplitude}, plus augment
    seed       master run seed (also the default synth seed)
    output_dir where train logs, checkpoints and figures land

Attention fields left unset follow the width preset (full: 64 channels,
window 8, 8 heads; tiny: 32 channels, window 4, 4 heads).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .attention import AttentionConfig
from .errors import ConfigError
from .losses import LossConfig
from .network import _PRESET_ATTENTION, ModelConfig


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 6e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01

    def validate(self) -> "OptimizerConfig":
        if not 0 < self.lr:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), "
                              f"got {self.betas}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, "
                              f"got {self.weight_decay}")
        return self


@dataclass(frozen=True)
class ScheduleConfig:
    epochs: int = 4
    batch_size: int = 4
    log_interval: int = 1

    def validate(self) -> "ScheduleConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.log_interval < 1:
            raise ConfigError(f"log_interval must be >= 1, "
                              f"got {self.log_interval}")
        return self


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    synth_count: int = 8
    synth_size: int = 64
    synth_seed: int | None = None
    noise_amplitude: int = 18
    augment: bool = True

    def validate(self) -> "DataConfig":
        if self.root is None:
            if self.synth_count < 1:
                raise ConfigError(f"synth count must be >= 1, "
                                  f"got {self.synth_count}")
            if self.synth_size < 32 or self.synth_size % 32:
                raise ConfigError(f"synth size must be a positive multiple "
                                  f"of 32, got {self.synth_size}")
            if self.noise_amplitude < 0:
                raise ConfigError(f"noise amplitude must be >= 0, "
                                  f"got {self.noise_amplitude}")
        return self


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig.tiny(num_classes=5))
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = "runs/unetformer"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.loss.validate()
        self.optimizer.validate()
        self.schedule.validate()
        self.data.validate()
        if not 0 <= self.seed < 2 ** 48:
            raise ConfigError(f"seed must be in [0, 2**48), got {self.seed}")
        return self


# ---------------------------------------------------------------------------
# parsing


def _check_keys(section: str, raw: dict, allowed: tuple[str, ...]) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section or 'config'} must be an object, "
                          f"got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        where = f" in {section}" if section else ""
        raise ConfigError(f"unknown config key{'s' if len(unknown) > 1 else ''}"
                          f"{where}: {', '.join(unknown)}")


def _coerce(section: str, key: str, value, kind):
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        pass
    label = f"{section}.{key}" if section else key
    raise ConfigError(f"{label} must be {kind.__name__}, got {value!r}")


def _parse_section(section: str, raw: dict, defaults, fields: dict):
    _check_keys(section, raw, tuple(fields))
    kwargs = {}
    for key, kind in fields.items():
        if key in raw:
            kwargs[key] = _coerce(section, key, raw[key], kind)
    return replace(defaults, **kwargs)


def _parse_attention(raw: dict, preset: str) -> AttentionConfig:
    defaults = _PRESET_ATTENTION[preset]
    return _parse_section("model.attention", raw, defaults, {
        "channels": int, "window_size": int, "num_heads": int,
        "cross_window_interaction": bool, "include_identity_term": bool,
        "relative_position_bias": bool, "mlp_ratio": int,
    })


def _parse_model(raw: dict) -> ModelConfig:
    allowed = ("width_preset", "num_classes", "use_frh", "use_aux_head",
               "input_channels", "attention")
    _check_keys("model", raw, allowed)
    preset = _coerce("model", "width_preset", raw.get("width_preset", "tiny"),
                     str)
    if preset not in _PRESET_ATTENTION:
        raise ConfigError(f"model.width_preset must be one of "
                          f"{sorted(_PRESET_ATTENTION)}, got {preset!r}")
    attention = _parse_attention(raw.get("attention", {}), preset)
    kwargs = {"width_preset": preset, "attention": attention}
    for key, kind in (("num_classes", int), ("use_frh", bool),
                      ("use_aux_head", bool), ("input_channels", int)):
        if key in raw:
            kwargs[key] = _coerce("model", key, raw[key], kind)
    kwargs.setdefault("num_classes", 5)
    return ModelConfig(**kwargs)


def _parse_data(raw: dict) -> DataConfig:
    _check_keys("data", raw, ("root", "synth", "augment"))
    kwargs = {}
    if raw.get("root") is not None:
        kwargs["root"] = _coerce("data", "root", raw["root"], str)
    synth = raw.get("synth", {})
    _check_keys("data.synth", synth,
                ("seed", "count", "size", "noise_amplitude"))
    if "seed" in synth:
        kwargs["synth_seed"] = _coerce("data.synth", "seed", synth["seed"], int)
    if "count" in synth:
        kwargs["synth_count"] = _coerce("data.synth", "count",
                                        synth["count"], int)
    if "size" in synth:
        kwargs["synth_size"] = _coerce("data.synth", "size", synth["size"], int)
    if "noise_amplitude" in synth:
        kwargs["noise_amplitude"] = _coerce("data.synth", "noise_amplitude",
                                            synth["noise_amplitude"], int)
    if "augment" in raw:
        kwargs["augment"] = _coerce("data", "augment", raw["augment"], bool)
    return DataConfig(**kwargs)


def run_config_from_dict(raw: dict) -> RunConfig:
    """Build a validated RunConfig from parsed JSON; unknown keys error."""
    _check_keys("", raw, ("model", "loss", "optimizer", "schedule", "data",
                          "seed", "output_dir"))
    model = _parse_model(raw.get("model", {}))
    loss = _parse_section("loss", raw.get("loss", {}), LossConfig(), {
        "aux_weight": float, "dice_eps": float, "ignore_label": int})
    optimizer_raw = dict(raw.get("optimizer", {}))
    _check_keys("optimizer", optimizer_raw, ("lr", "betas", "weight_decay"))
    betas = optimizer_raw.pop("betas", None)
    optimizer = _parse_section("optimizer", optimizer_raw, OptimizerConfig(),
                               {"lr": float, "weight_decay": float})
    if betas is not None:
        if not isinstance(betas, (list, tuple)) or len(betas) != 2:
            raise ConfigError(f"optimizer.betas must be two numbers, "
                              f"got {betas!r}")
        optimizer = replace(optimizer, betas=(
            _coerce("optimizer", "betas[0]", betas[0], float),
            _coerce("optimizer", "betas[1]", betas[1], float)))
    schedule = _parse_section("schedule", raw.get("schedule", {}),
                              ScheduleConfig(), {
        "epochs": int, "batch_size": int, "log_interval": int})
    data = _parse_data(raw.get("data", {}))
    seed = _coerce("", "seed", raw.get("seed", 0), int)
    output_dir = _coerce("", "output_dir",
                         raw.get("output_dir", "runs/unetformer"), str)
    return RunConfig(model=model, loss=loss, optimizer=optimizer,
                     schedule=schedule, data=data, seed=seed,
                     output_dir=output_dir).validate()


def load_run_config(path) -> RunConfig:
    """Read and validate a JSON run file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return run_config_from_dict(raw)
