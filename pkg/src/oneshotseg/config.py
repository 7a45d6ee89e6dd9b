"""Single-document JSON configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights, NccConfig
from .nets import EncoderConfig, ModelConfig
from .synth import SyntheticSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    teacher: EncoderConfig = field(default_factory=lambda: EncoderConfig(stage_channels=(16, 32, 64)))
    teacher_weights: typing.Optional[str] = None


@dataclass
class MetricConfig:
    include_background: bool = False


@dataclass
class ConfigFile:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(stage="pretrain", steps=200))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(stage="finetune", steps=300))
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.model.encoder, self.model.teacher, self.synthetic.num_classes)


_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _build(cls, data, where: str, fixed: dict | None = None, defaults: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    fixed = fixed or {}
    kwargs = {**(defaults or {}), **fixed}
    for key, value in data.items():
        hint = hints[key]
        path = f"{where}.{key}"
        if key in fixed and value != fixed[key]:
            raise ConfigError(f"{path}: must be {fixed[key]!r} in this section")
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, path)
        elif hint in _SCALARS:
            ok = isinstance(value, _SCALARS[hint]) and not (hint is not bool and isinstance(value, bool))
            if not ok:
                raise ConfigError(f"{path}: expected {hint.__name__}, got {value!r}")
        elif hint is tuple and not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def parse_config(data: dict) -> ConfigFile:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(data) - {f.name for f in dataclasses.fields(ConfigFile)})
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    return ConfigFile(
        synthetic=_build(SyntheticSpec, data.get("synthetic", {}), "synthetic"),
        model=_build(ModelSection, data.get("model", {}), "model"),
        pretrain=_build(TrainConfig, data.get("pretrain", {}), "pretrain",
                        {"stage": "pretrain"}, {"steps": 200}),
        finetune=_build(TrainConfig, data.get("finetune", {}), "finetune",
                        {"stage": "finetune"}, {"steps": 300}),
        metrics=_build(MetricConfig, data.get("metrics", {}), "metrics"),
    )


def load_config(path=None) -> ConfigFile:
    if path is None:
        return ConfigFile()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(data)


def config_to_dict(cfg: ConfigFile) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


__all__ = ["ConfigError", "ConfigFile", "MetricConfig", "ModelSection", "LossWeights",
           "NccConfig", "load_config", "parse_config", "config_to_dict"]
