"""Serializable pipeline configuration with strict key checking.

A config file is the source of truth for CLI runs; individual flags
override single fields, and the final effective config is written next to
the outputs so a run can be reproduced from its artifacts alone.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .nn import TrainConfig
from .retinex import RetinexConfig

__all__ = ["ConfigError", "PipelineConfig"]


class ConfigError(ValueError):
    pass


def _strict_kwargs(cls, data, where):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return data


@dataclass
class PipelineConfig:
    retinex: RetinexConfig = field(default_factory=RetinexConfig)
    robust: bool = True
    trim_fraction: float = 0.10
    uv_resolution: int = 128
    texture_source: str = "msr"
    scene: dict = None
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out_dir: str = "out"

    def to_dict(self):
        return {
            "retinex": self.retinex.to_dict(),
            "robust": self.robust,
            "trim_fraction": self.trim_fraction,
            "uv_resolution": self.uv_resolution,
            "texture_source": self.texture_source,
            "scene": self.scene,
            "train": dataclasses.asdict(self.train),
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(_strict_kwargs(cls, data, "config"))
        if "retinex" in data and not isinstance(data["retinex"], RetinexConfig):
            sub = _strict_kwargs(RetinexConfig, data["retinex"], "config.retinex")
            sub = dict(sub)
            if "sigmas" in sub:
                sub["sigmas"] = tuple(sub["sigmas"])
            data["retinex"] = RetinexConfig(**sub)
        if "train" in data and not isinstance(data["train"], TrainConfig):
            data["train"] = TrainConfig(
                **_strict_kwargs(TrainConfig, data["train"], "config.train"))
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid config JSON in {path}: {exc}")
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be an object in {path}")
        return cls.from_dict(data)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
