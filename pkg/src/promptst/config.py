"""
Model configuration and run-configuration files.

A run configuration is a JSON object with optional ``model`` and ``train``
sections, for example::

    {"model": {"d_model": 16, "temporal_layers": 1}, "train": {"max_epochs": 50}}
"""
import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

from .exceptions import ConfigError, DataError


@dataclass(frozen=True)
class ModelConfig:
    """
    Shape of the spatio-temporal transformer.

    ``input_len`` is the history length T, ``horizon`` the forecast length H,
    ``num_regions`` the grid cell count N and ``num_attributes`` the attribute
    count C. Layer counts may be 0 (the encoder then reduces to its
    positional embedding).
    """
    input_len: int = 12
    horizon: int = 12
    num_regions: int = 64
    num_attributes: int = 1
    d_model: int = 32
    temporal_layers: int = 2
    spatial_layers: int = 2
    num_heads: int = 4
    d_ff: Optional[int] = None

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("input_len", "horizon", "num_regions", "num_attributes", "d_model", "num_heads", "d_ff"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model config: {name} must be a positive integer, got {value!r}")
        for name in ("temporal_layers", "spatial_layers"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ConfigError(f"model config: {name} must be a non-negative integer, got {value!r}")
        if self.d_model % self.num_heads:
            raise ConfigError(
                f"model config: d_model={self.d_model} is not divisible by num_heads={self.num_heads}"
            )

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    @property
    def d_v(self) -> int:
        return self.d_model // self.num_heads

    def with_attributes(self, count: int) -> "ModelConfig":
        return replace(self, num_attributes=count)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"model config: unknown keys {unknown}")
        return cls(**data)


def load_run_config(path: str) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Return the raw ``model`` and ``train`` sections of a run-config file"""
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})")

    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = sorted(set(data) - {"model", "train"})
    if unknown:
        raise ConfigError(f"{path}: unknown sections {unknown}")
    return dict(data.get("model", {})), dict(data.get("train", {}))
