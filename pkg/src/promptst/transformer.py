"""
Spatio-temporal transformer backbone and head.

Each attribute's ``T x N`` window goes through the same pipeline with shared
parameters::

    T x N -> input map -> N x T x D -> temporal encoder -> last step N x D
          -> spatial encoder -> N x D -> sigmoid head -> N x H

Leading axes of every input are treated as batch axes, so a batch of windows
and all attributes of each window run through one call.
"""
import hashlib
import logging
from collections import OrderedDict
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    layer_norm,
    matmul,
    permute,
    relu,
    reshape,
    sigmoid,
    slice_axis,
    softmax,
    swapaxes,
    transpose_last2,
)
from .config import ModelConfig
from .exceptions import DimensionError, ShapeMismatchError
from .prompts import PromptSet, inject_spatial, inject_temporal, truncate

logger = logging.getLogger(__name__)

HEAD_PREFIX = "head."
# Independent random streams per parameter group
BACKBONE_STREAM = 0
HEAD_STREAM = 1
PROMPT_STREAM = 2

LAYER_SHAPES = (
    ("query", lambda c: (c.d_model, c.d_model)),
    ("key", lambda c: (c.d_model, c.d_model)),
    ("value", lambda c: (c.d_model, c.d_model)),
    ("out", lambda c: (c.d_model, c.d_model)),
    ("norm1.gain", lambda c: (c.d_model,)),
    ("norm1.bias", lambda c: (c.d_model,)),
    ("ffn.w1", lambda c: (c.d_model, c.d_ff)),
    ("ffn.b1", lambda c: (c.d_ff,)),
    ("ffn.w2", lambda c: (c.d_ff, c.d_model)),
    ("ffn.b2", lambda c: (c.d_model,)),
    ("norm2.gain", lambda c: (c.d_model,)),
    ("norm2.bias", lambda c: (c.d_model,)),
)


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every named parameter array of the backbone and head, in canonical order"""
    shapes = OrderedDict()
    shapes["input_map.weight"] = (1, config.d_model)
    shapes["input_map.bias"] = (config.d_model,)
    shapes["temporal_pos"] = (config.input_len, config.d_model)
    shapes["spatial_pos"] = (config.num_regions, config.d_model)
    for encoder, count in (("temporal", config.temporal_layers), ("spatial", config.spatial_layers)):
        for index in range(count):
            for name, shape in LAYER_SHAPES:
                shapes[f"{encoder}.{index}.{name}"] = shape(config)
    shapes.update(head_shapes(config))
    return shapes


def head_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    return OrderedDict([
        ("head.weight", (config.d_model, config.horizon)),
        ("head.bias", (config.horizon,)),
    ])


def backbone_param_count(config: ModelConfig) -> int:
    """Size of theta: every array outside the head"""
    return sum(int(np.prod(shape)) for name, shape in parameter_shapes(config).items()
               if not name.startswith(HEAD_PREFIX))


class ModelParameters:
    """
    Named parameter tensors of the transformer.

    Everything under ``head.`` is the head; everything else is the backbone.
    Freezing is expressed through ``requires_grad`` on each tensor.
    """

    def __init__(self, config: ModelConfig, tensors: Mapping[str, Tensor]):
        expected = parameter_shapes(config)
        missing = [name for name in expected if name not in tensors]
        if missing:
            raise ShapeMismatchError(missing[0], expected[missing[0]], ())
        extra = [name for name in tensors if name not in expected]
        if extra:
            raise ShapeMismatchError(extra[0], (), tensors[extra[0]].shape)
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeMismatchError(name, shape, tensors[name].shape)
        self.config = config
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict((name, tensors[name]) for name in expected)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def head_names(self) -> List[str]:
        return [name for name in self.tensors if name.startswith(HEAD_PREFIX)]

    def backbone_names(self) -> List[str]:
        return [name for name in self.tensors if not name.startswith(HEAD_PREFIX)]

    def parameter_count(self, names: Optional[Iterable[str]] = None) -> int:
        names = self.names() if names is None else names
        return sum(self.tensors[name].size for name in names)

    def set_trainable(self, names: Iterable[str]):
        """Make exactly ``names`` trainable and freeze the rest"""
        names = set(names)
        for name, tensor in self.tensors.items():
            tensor.requires_grad = name in names
            tensor.grad = None

    def trainable(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.tensors.items() if t.requires_grad}

    def layer(self, encoder: str, index: int) -> Dict[str, Tensor]:
        prefix = f"{encoder}.{index}."
        return {name[len(prefix):]: t for name, t in self.tensors.items() if name.startswith(prefix)}

    def copy(self, requires_grad: Optional[bool] = None) -> "ModelParameters":
        return ModelParameters(self.config, {
            name: Tensor(t.data, requires_grad=t.requires_grad if requires_grad is None else requires_grad, name=name)
            for name, t in self.tensors.items()
        })

    def replace_head(self, head: Mapping[str, Tensor]) -> "ModelParameters":
        tensors = dict(self.tensors)
        tensors.update(head)
        return ModelParameters(self.config, tensors)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data) for name, t in self.tensors.items())

    def checksum(self, names: Optional[Iterable[str]] = None) -> str:
        digest = hashlib.md5()
        for name in (self.names() if names is None else names):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return digest.hexdigest()

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray],
                    requires_grad: bool = True) -> "ModelParameters":
        return cls(config, {name: Tensor(a, requires_grad=requires_grad, name=name) for name, a in arrays.items()})

    def __repr__(self):
        return f"ModelParameters(parameters={self.parameter_count()}, trainable={sum(t.size for t in self.trainable().values())})"


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_array(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gain":
        return np.ones(shape)
    if leaf.startswith("b") and len(shape) == 1:
        # bias, b1, b2
        return np.zeros(shape)
    if name.endswith("_pos"):
        return _uniform(rng, shape, shape[-1])
    return _uniform(rng, shape, shape[0])


def init_head(config: ModelConfig, seed: int) -> Dict[str, Tensor]:
    rng = np.random.default_rng((seed, HEAD_STREAM))
    return {name: Tensor(_init_array(name, shape, rng), requires_grad=True, name=name)
            for name, shape in head_shapes(config).items()}


def init_parameters(config: ModelConfig, seed: int) -> ModelParameters:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains"""
    rng = np.random.default_rng((seed, BACKBONE_STREAM))
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.startswith(HEAD_PREFIX):
            continue
        tensors[name] = Tensor(_init_array(name, shape, rng), requires_grad=True, name=name)
    tensors.update(init_head(config, seed))
    params = ModelParameters(config, tensors)
    logger.debug(f"Initialized {params!r} with seed {seed}")
    return params


def input_map(x: Tensor, params: ModelParameters) -> Tensor:
    """``(..., T, N)`` window to ``(..., N, T, D)`` via sigmoid(x * W_m + b_m)"""
    config = params.config
    if x.ndim < 2 or x.shape[-2:] != (config.input_len, config.num_regions):
        raise DimensionError(
            f"input_map: expected window (..., {config.input_len}, {config.num_regions}), got {x.shape}"
        )
    per_region = transpose_last2(x)
    scalars = reshape(per_region, per_region.shape + (1,))
    return sigmoid(add(matmul(scalars, params["input_map.weight"]), params["input_map.bias"]))


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, length, width = x.shape
    split = reshape(x, tuple(lead) + (length, num_heads, width // num_heads))
    return swapaxes(split, -2, -3)


def multi_head_attention(x: Tensor, layer: Mapping[str, Tensor], num_heads: int) -> Tensor:
    """Self-attention over axis -2 of ``(..., L, D)`` with fused per-head projections"""
    width = x.shape[-1]
    if width % num_heads:
        raise DimensionError(f"multi_head_attention: width {width} not divisible by {num_heads} heads")
    d_k = width // num_heads
    queries = _split_heads(matmul(x, layer["query"]), num_heads)
    keys = _split_heads(matmul(x, layer["key"]), num_heads)
    values = _split_heads(matmul(x, layer["value"]), num_heads)

    scores = matmul(queries, transpose_last2(keys)) * (1.0 / np.sqrt(d_k))
    attended = matmul(softmax(scores), values)

    merged = swapaxes(attended, -2, -3)
    merged = reshape(merged, merged.shape[:-2] + (width,))
    return matmul(merged, layer["out"])


def attention_block(x: Tensor, layer: Mapping[str, Tensor], num_heads: int) -> Tensor:
    return layer_norm(add(x, multi_head_attention(x, layer, num_heads)), layer["norm1.gain"], layer["norm1.bias"])


def feed_forward_block(x: Tensor, layer: Mapping[str, Tensor]) -> Tensor:
    hidden = relu(add(matmul(x, layer["ffn.w1"]), layer["ffn.b1"]))
    projected = add(matmul(hidden, layer["ffn.w2"]), layer["ffn.b2"])
    return layer_norm(add(x, projected), layer["norm2.gain"], layer["norm2.bias"])


def encoder_layer(x: Tensor, layer: Mapping[str, Tensor], num_heads: int) -> Tensor:
    return feed_forward_block(attention_block(x, layer, num_heads), layer)


def temporal_encode(x: Tensor, params: ModelParameters, prompts: Optional[PromptSet] = None) -> Tensor:
    """``(..., T, N)`` window to the last-timestep representation ``(..., N, D)``"""
    config = params.config
    if prompts is not None:
        prompts.check_compatible(config)
    z = add(input_map(x, params), params["temporal_pos"])
    for index in range(config.temporal_layers):
        augmented, injected = inject_temporal(z, index, prompts)
        z = truncate(encoder_layer(augmented, params.layer("temporal", index), config.num_heads), injected)
    steps = z.shape[-2]
    last = slice_axis(z, -2, steps - 1, steps)
    return reshape(last, last.shape[:-2] + (last.shape[-1],))


def spatial_encode(z_temp: Tensor, params: ModelParameters, prompts: Optional[PromptSet] = None) -> Tensor:
    config = params.config
    if z_temp.ndim < 2 or z_temp.shape[-2:] != (config.num_regions, config.d_model):
        raise DimensionError(
            f"spatial_encode: expected (..., {config.num_regions}, {config.d_model}), got {z_temp.shape}"
        )
    z = add(z_temp, params["spatial_pos"])
    for index in range(config.spatial_layers):
        augmented, injected = inject_spatial(z, index, prompts)
        z = truncate(encoder_layer(augmented, params.layer("spatial", index), config.num_heads), injected)
    return z


def head(z_spa: Tensor, params: ModelParameters) -> Tensor:
    return sigmoid(add(matmul(z_spa, params["head.weight"]), params["head.bias"]))


def encode_attributes(x: Tensor, params: ModelParameters, prompts: Optional[PromptSet] = None) -> Tensor:
    """``(..., T, N)`` attribute windows to predictions ``(..., N, H)``"""
    return head(spatial_encode(temporal_encode(x, params, prompts), params, prompts), params)


PromptArg = Union[None, PromptSet, Sequence[Optional[PromptSet]]]


def forward(params: ModelParameters, X: Union[Tensor, np.ndarray], prompts: PromptArg = None) -> Tensor:
    """
    Predict ``H x N x C`` from a ``T x N x C`` window (or a ``B x T x N x C``
    batch, giving ``B x H x N x C``).

    ``prompts`` is one PromptSet shared by every attribute, or a sequence with
    one entry (possibly None) per attribute.
    """
    config = params.config
    X = X if isinstance(X, Tensor) else Tensor(X)
    single = X.ndim == 3
    if single:
        X = reshape(X, (1,) + X.shape)
    if X.ndim != 4 or X.shape[1:3] != (config.input_len, config.num_regions):
        raise DimensionError(
            f"forward: expected (B, {config.input_len}, {config.num_regions}, C) input, got {X.shape}"
        )
    if X.shape[-1] != config.num_attributes:
        raise DimensionError(f"forward: model configured for {config.num_attributes} attributes, input has {X.shape[-1]}")

    if prompts is None or isinstance(prompts, PromptSet):
        windows = permute(X, (0, 3, 1, 2))  # B, C, T, N
        predictions = permute(encode_attributes(windows, params, prompts), (0, 3, 2, 1))
    else:
        if len(prompts) != X.shape[-1]:
            raise DimensionError(f"forward: {len(prompts)} prompt sets for {X.shape[-1]} attributes")
        outputs = []
        for attribute, attribute_prompts in enumerate(prompts):
            window = permute(slice_axis(X, 3, attribute, attribute + 1), (0, 3, 1, 2))
            outputs.append(permute(encode_attributes(window, params, attribute_prompts), (0, 3, 2, 1)))
        predictions = concat(outputs, axis=-1)

    if single:
        predictions = reshape(predictions, predictions.shape[1:])
    return predictions
