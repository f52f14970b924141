"""
Prompt tokens for Phase II tuning and their injection into encoder layers.

Each prompted layer follows the same cycle: prepend tokens to the layer's
sequence axis, run the layer, then drop the leading injected positions so the
sequence length is restored. The ``add`` variant adds tokens instead and needs
no truncation.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor, add, broadcast_to, concat, reshape, slice_axis, sum_axis
from .config import ModelConfig
from .exceptions import PromptConfigError

logger = logging.getLogger(__name__)

ST_TOKENS = "prompt.st"
TINY_TEMPORAL = "prompt.tiny_temporal"
TINY_SPATIAL = "prompt.tiny_spatial"


class PromptKind(str, Enum):
    ST_FULL = "st"
    TINY = "tiny"
    SHALLOW = "shallow"
    ADD = "add"
    NONE = "none"


@dataclass(frozen=True)
class PromptVariant:
    kind: PromptKind = PromptKind.ST_FULL
    n_st: int = 2
    n_ti: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", PromptKind(self.kind))
        if self.n_st < 0 or self.n_ti < 0:
            raise PromptConfigError(f"token counts must be non-negative, got n_st={self.n_st}, n_ti={self.n_ti}")

    def to_dict(self) -> Dict[str, object]:
        return {"kind": self.kind.value, "n_st": self.n_st, "n_ti": self.n_ti}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "PromptVariant":
        return cls(kind=PromptKind(data["kind"]), n_st=int(data.get("n_st", 2)), n_ti=int(data.get("n_ti", 2)))


def prompt_shapes(variant: PromptVariant, config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Named token arrays a variant owns; arrays with an empty axis are omitted"""
    n, d = config.num_regions, config.d_model
    shapes: Dict[str, Tuple[int, ...]] = {}
    if variant.kind in (PromptKind.ST_FULL, PromptKind.ADD):
        shapes[ST_TOKENS] = (config.temporal_layers, n, variant.n_st, d)
    elif variant.kind == PromptKind.SHALLOW:
        shapes[ST_TOKENS] = (min(1, config.temporal_layers), n, variant.n_st, d)
    elif variant.kind == PromptKind.TINY:
        shapes[TINY_TEMPORAL] = (config.temporal_layers, variant.n_ti, d)
        shapes[TINY_SPATIAL] = (config.spatial_layers, variant.n_ti, d)
    return {name: shape for name, shape in shapes.items() if all(shape)}


def prompt_param_count(variant: PromptVariant, config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for shape in prompt_shapes(variant, config).values())


def head_param_count(config: ModelConfig) -> int:
    return config.d_model * config.horizon + config.horizon


def trainable_params(variant: PromptVariant, config: ModelConfig) -> int:
    """Parameters updated by prompt tuning: the tokens plus a fresh head"""
    return prompt_param_count(variant, config) + head_param_count(config)


class PromptSet:
    """Trainable prompt tokens for one target attribute"""

    def __init__(self, variant: PromptVariant, config: ModelConfig, tensors: Dict[str, Tensor]):
        expected = prompt_shapes(variant, config)
        if set(tensors) != set(expected):
            raise PromptConfigError(
                f"{variant.kind.value} prompts need arrays {sorted(expected)}, got {sorted(tensors)}"
            )
        for name, tensor in tensors.items():
            if tensor.shape != expected[name]:
                raise PromptConfigError(f"prompt array '{name}': expected {expected[name]}, found {tensor.shape}")
        self.variant = variant
        self.config = config
        self.tensors = tensors

    @property
    def kind(self) -> PromptKind:
        return self.variant.kind

    def names(self) -> List[str]:
        return list(self.tensors)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def check_compatible(self, config: ModelConfig):
        for field in ("num_regions", "d_model", "temporal_layers", "spatial_layers"):
            if getattr(config, field) != getattr(self.config, field):
                raise PromptConfigError(
                    f"{self.kind.value} prompts were built for {field}={getattr(self.config, field)}, "
                    f"model has {getattr(config, field)}"
                )

    def layer_tokens(self, name: str, layer: int) -> Optional[Tensor]:
        tokens = self.tensors.get(name)
        if tokens is None or layer >= tokens.shape[0]:
            return None
        picked = slice_axis(tokens, 0, layer, layer + 1)
        return reshape(picked, tokens.shape[1:])

    def __repr__(self):
        return f"PromptSet(kind={self.kind.value}, parameters={self.parameter_count()})"


def init_prompts(variant: PromptVariant, config: ModelConfig, seed: int) -> PromptSet:
    """Xavier-uniform tokens, fan_in = fan_out = d_model"""
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (2 * config.d_model))
    tensors = {
        name: Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
        for name, shape in prompt_shapes(variant, config).items()
    }
    prompts = PromptSet(variant, config, tensors)
    logger.debug(f"Initialized {prompts!r}")
    return prompts


def inject_temporal(z: Tensor, layer: int, prompts: Optional[PromptSet]) -> Tuple[Tensor, int]:
    """
    Prepare the input of temporal layer ``layer`` (0-based).

    ``z`` is ``(..., N, T', D)``. Returns the augmented input and the number of
    leading positions :func:`truncate` must drop after the layer.
    """
    if prompts is None or prompts.kind == PromptKind.NONE:
        return z, 0
    if not 0 <= layer < prompts.config.temporal_layers:
        raise PromptConfigError(
            f"temporal layer {layer} out of range for {prompts.config.temporal_layers} layers"
        )
    if z.ndim < 3 or z.shape[-3] != prompts.config.num_regions or z.shape[-1] != prompts.config.d_model:
        raise PromptConfigError(f"temporal input {z.shape} does not match prompts built for {prompts.config}")

    kind = prompts.kind
    if kind in (PromptKind.ST_FULL, PromptKind.SHALLOW):
        tokens = prompts.layer_tokens(ST_TOKENS, layer)
        if tokens is None:
            return z, 0
        count = tokens.shape[-2]
        expanded = broadcast_to(tokens, z.shape[:-2] + (count, z.shape[-1]))
        return concat([expanded, z], axis=-2), count
    if kind == PromptKind.TINY:
        tokens = prompts.layer_tokens(TINY_TEMPORAL, layer)
        if tokens is None:
            return z, 0
        count = tokens.shape[0]
        # the same tokens for every region
        expanded = broadcast_to(tokens, z.shape[:-2] + (count, z.shape[-1]))
        return concat([expanded, z], axis=-2), count
    if kind == PromptKind.ADD:
        tokens = prompts.layer_tokens(ST_TOKENS, layer)
        if tokens is None:
            return z, 0
        return add(z, sum_axis(tokens, axis=-2, keepdims=True)), 0
    raise PromptConfigError(f"unknown prompt kind {kind!r}")


def inject_spatial(z: Tensor, layer: int, prompts: Optional[PromptSet]) -> Tuple[Tensor, int]:
    """Prepare the input of spatial layer ``layer``; only tiny prompts act here"""
    if prompts is None or prompts.kind != PromptKind.TINY:
        return z, 0
    if not 0 <= layer < prompts.config.spatial_layers:
        raise PromptConfigError(f"spatial layer {layer} out of range for {prompts.config.spatial_layers} layers")
    tokens = prompts.layer_tokens(TINY_SPATIAL, layer)
    if tokens is None:
        return z, 0
    count = tokens.shape[0]
    expanded = broadcast_to(tokens, z.shape[:-2] + (count, z.shape[-1]))
    return concat([expanded, z], axis=-2), count


def truncate(z: Tensor, count: int) -> Tensor:
    """Drop the ``count`` leading positions of the sequence axis (-2)"""
    if count == 0:
        return z
    return slice_axis(z, -2, count, z.shape[-2])
