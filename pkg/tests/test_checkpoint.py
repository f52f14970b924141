import struct

import numpy as np
import pytest

from promptst.checkpoint import (
    MAGIC,
    Checkpoint,
    check_compatible,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from promptst.dataio import Normalizer
from promptst.exceptions import CheckpointFormatError, DataError, ShapeMismatchError
from promptst.prompts import PromptKind, PromptVariant, init_prompts
from promptst.transformer import init_parameters


@pytest.fixture
def checkpoint(tiny_config):
    return Checkpoint(
        params=init_parameters(tiny_config.with_attributes(1), 2),
        normalizer=Normalizer(np.array([0.5]), np.array([41.25])),
        prompts=init_prompts(PromptVariant(PromptKind.TINY), tiny_config, seed=9),
        attributes=[1],
        attribute_names=["distinct_0"],
        provenance={"strategy": "prompt_tune", "seed": 3, "epochs_run": 12, "best_val_loss": 0.125},
    )


def test_save_load_save_is_byte_identical(tmp_path, checkpoint):
    first = str(tmp_path / "a.ckpt")
    second = str(tmp_path / "b.ckpt")
    save_checkpoint(checkpoint, first)
    save_checkpoint(load_checkpoint(first), second)
    assert open(first, "rb").read() == open(second, "rb").read()


def test_round_trip_restores_every_array(checkpoint):
    loaded = from_bytes(to_bytes(checkpoint))
    assert loaded.config == checkpoint.config
    for name, array in checkpoint.params.arrays().items():
        np.testing.assert_array_equal(loaded.params[name].data, array)
    assert loaded.prompts.variant == checkpoint.prompts.variant
    for name, tensor in checkpoint.prompts.tensors.items():
        np.testing.assert_array_equal(loaded.prompts.tensors[name].data, tensor.data)
    np.testing.assert_array_equal(loaded.normalizer.maximum, [41.25])
    assert loaded.attributes == [1] and loaded.attribute_names == ["distinct_0"]
    assert loaded.provenance["epochs_run"] == 12
    assert loaded.config_hash == checkpoint.config_hash


def test_layout_starts_with_magic_and_version(checkpoint):
    payload = to_bytes(checkpoint)
    magic, version, header_len = struct.unpack_from("<8sIQ", payload)
    assert magic == MAGIC and version == 1
    assert payload[20:20 + header_len].decode("utf-8").startswith("{")


def test_non_finite_provenance_is_stored_as_null(checkpoint):
    checkpoint.provenance["best_val_loss"] = float("inf")
    assert from_bytes(to_bytes(checkpoint)).provenance["best_val_loss"] is None


def test_rejects_foreign_and_truncated_files(checkpoint):
    payload = to_bytes(checkpoint)
    with pytest.raises(CheckpointFormatError):
        from_bytes(b"NOTACKPT" + payload[8:])
    with pytest.raises(CheckpointFormatError):
        from_bytes(payload[:-8])
    with pytest.raises(CheckpointFormatError):
        from_bytes(payload[:10])


def _with_header(header: bytes) -> bytes:
    return struct.pack("<8sIQ", MAGIC, 1, len(header)) + header


@pytest.mark.parametrize("header", [
    b'{"model": {}}',
    b'{"arrays": []}',
    b'[1, 2]',
    b'{"model": {}, "arrays": [{"name": "spatial_pos", "offset": 0, "nbytes": 8}]}',
    b'{"model": {}, "arrays": "spatial_pos"}',
])
def test_rejects_malformed_headers(header):
    with pytest.raises(CheckpointFormatError):
        from_bytes(_with_header(header))


def test_missing_file_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(str(tmp_path / "absent.ckpt"))


def test_compatibility_names_the_array(checkpoint):
    check_compatible(checkpoint, 6)
    with pytest.raises(ShapeMismatchError) as info:
        check_compatible(checkpoint, 9)
    assert info.value.name == "spatial_pos"
    with pytest.raises(ShapeMismatchError) as info:
        check_compatible(checkpoint, 6, input_len=12)
    assert info.value.name == "temporal_pos"
