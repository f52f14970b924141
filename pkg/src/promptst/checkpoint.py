"""
STPTCKPT checkpoint container.

    8 bytes   magic ``STPTCKPT``
    4 bytes   format version, little-endian uint32
    8 bytes   header length, little-endian uint64
    header    UTF-8 JSON (sorted keys): model config, prompt variant,
              attributes, provenance and the array directory
    arrays    raw little-endian float64 data in directory order

The header is canonical JSON, so saving a loaded checkpoint reproduces the
original file byte for byte.
"""
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .config import ModelConfig
from .dataio import Normalizer
from .exceptions import CheckpointFormatError, DataError, ShapeMismatchError
from .prompts import PromptSet, PromptVariant
from .transformer import ModelParameters
from .utils import canonical_json, config_hash

logger = logging.getLogger(__name__)

MAGIC = b"STPTCKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_DTYPE = np.dtype("<f8")

NORMALIZER_MIN = "normalizer.min"
NORMALIZER_MAX = "normalizer.max"


@dataclass
class Checkpoint:
    """Everything needed to reproduce predictions of a trained model"""
    params: ModelParameters
    normalizer: Optional[Normalizer] = None
    prompts: Optional[PromptSet] = None
    # attribute indices of the data file this model serves, and their names
    attributes: List[int] = field(default_factory=list)
    attribute_names: List[str] = field(default_factory=list)
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def config_hash(self) -> str:
        return config_hash({
            "model": self.config.to_dict(),
            "prompt_variant": self.prompts.variant.to_dict() if self.prompts else None,
        })

    def arrays(self) -> List[Tuple[str, np.ndarray]]:
        named = list(self.params.arrays().items())
        if self.prompts is not None:
            named.extend((name, t.data) for name, t in self.prompts.tensors.items())
        if self.normalizer is not None:
            named.append((NORMALIZER_MIN, self.normalizer.minimum))
            named.append((NORMALIZER_MAX, self.normalizer.maximum))
        return named


def _clean(value: Any) -> Any:
    """Replace non-finite floats (not representable in JSON) with None"""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def to_bytes(checkpoint: Checkpoint) -> bytes:
    directory = []
    blobs = []
    offset = 0
    for name, array in checkpoint.arrays():
        blob = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = {
        "model": checkpoint.config.to_dict(),
        "prompt_variant": checkpoint.prompts.variant.to_dict() if checkpoint.prompts else None,
        "attributes": list(checkpoint.attributes),
        "attribute_names": list(checkpoint.attribute_names),
        "provenance": _clean(json.loads(canonical_json(checkpoint.provenance))),
        "arrays": directory,
    }
    encoded = canonical_json(header).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(encoded)) + encoded + b"".join(blobs)


def _read_arrays(directory: List[Any], payload: bytes, body_start: int) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for index, entry in enumerate(directory):
        try:
            name = str(entry["name"])
            shape = tuple(int(n) for n in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"array entry {index} is malformed: {e!r}")
        start = body_start + offset
        stop = start + nbytes
        if offset < 0 or nbytes != int(np.prod(shape)) * _DTYPE.itemsize or stop > len(payload):
            raise CheckpointFormatError(f"array '{name}' has inconsistent size or offset")
        arrays[name] = np.frombuffer(payload[start:stop], dtype=_DTYPE).reshape(shape).astype(np.float64)
    return arrays


def from_bytes(payload: bytes) -> Checkpoint:
    if len(payload) < _PREAMBLE.size:
        raise CheckpointFormatError("checkpoint truncated before header")
    magic, version, header_len = _PREAMBLE.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointFormatError(f"not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    body_start = _PREAMBLE.size + header_len
    if len(payload) < body_start:
        raise CheckpointFormatError("checkpoint truncated inside header")
    try:
        header = json.loads(payload[_PREAMBLE.size:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable checkpoint header: {e}")

    if not isinstance(header, dict):
        raise CheckpointFormatError("checkpoint header is not a JSON object")
    for key in ("model", "arrays"):
        if key not in header:
            raise CheckpointFormatError(f"checkpoint header has no '{key}' entry")
    if not isinstance(header["model"], dict) or not isinstance(header["arrays"], list):
        raise CheckpointFormatError("checkpoint header has a malformed 'model' or 'arrays' entry")

    arrays = _read_arrays(header["arrays"], payload, body_start)
    config = ModelConfig.from_dict(header["model"])
    normalizer = None
    if NORMALIZER_MIN in arrays or NORMALIZER_MAX in arrays:
        if NORMALIZER_MIN not in arrays or NORMALIZER_MAX not in arrays:
            raise CheckpointFormatError("checkpoint stores only one of the normalizer bounds")
        normalizer = Normalizer(arrays.pop(NORMALIZER_MIN), arrays.pop(NORMALIZER_MAX))

    prompts = None
    variant_data = header.get("prompt_variant")
    if variant_data is not None:
        try:
            variant = PromptVariant.from_dict(variant_data)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"checkpoint header has a malformed prompt variant: {e!r}")
        prompt_arrays = {name: arrays.pop(name) for name in list(arrays) if name.startswith("prompt.")}
        prompts = PromptSet(variant, config, {
            name: Tensor(a, requires_grad=False, name=name) for name, a in prompt_arrays.items()
        })

    params = ModelParameters.from_arrays(config, arrays, requires_grad=False)
    return Checkpoint(
        params=params,
        normalizer=normalizer,
        prompts=prompts,
        attributes=list(header.get("attributes", [])),
        attribute_names=list(header.get("attribute_names", [])),
        provenance=dict(header.get("provenance", {})),
    )


def save_checkpoint(checkpoint: Checkpoint, path: str):
    payload = to_bytes(checkpoint)
    with open(path, "wb") as handle:
        handle.write(payload)
    logger.debug(f"Saved checkpoint {path} ({len(payload)} bytes)")


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as handle:
            payload = handle.read()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")
    checkpoint = from_bytes(payload)
    logger.debug(f"Loaded checkpoint {path}: {checkpoint.params!r}")
    return checkpoint


def check_compatible(checkpoint: Checkpoint, num_regions: int, input_len: Optional[int] = None):
    """Reject data whose grid or history length differs from the checkpoint"""
    config = checkpoint.config
    if num_regions != config.num_regions:
        raise ShapeMismatchError("spatial_pos", (num_regions, config.d_model), checkpoint.params["spatial_pos"].shape)
    if input_len is not None and input_len != config.input_len:
        raise ShapeMismatchError("temporal_pos", (input_len, config.d_model), checkpoint.params["temporal_pos"].shape)
