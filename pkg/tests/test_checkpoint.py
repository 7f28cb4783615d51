import struct

import numpy as np
import pytest

from lcumini.checkpoint import (
    MAGIC,
    BadMagicError,
    CorruptCheckpointError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from lcumini.model import ModelConfig, init_weights
from lcumini.trainer import attach_lora

SMALL = ModelConfig(model_dim=16, n_layers=1, n_heads=2, patch=4, image_size=8)


@pytest.fixture
def weights():
    return init_weights(SMALL, seed=3)


def test_round_trip_bitwise(tmp_path, weights):
    path = tmp_path / "w.lcu"
    cid = save_checkpoint(path, weights, {"lr": 1e-3})
    loaded, meta = load_checkpoint(path)
    assert len(cid) == 16
    assert loaded.config == weights.config
    assert meta["train"] == {"lr": 1e-3}
    assert loaded.params.keys() == weights.params.keys()
    for k, p in weights.params.items():
        assert loaded.params[k].data.tobytes() == p.data.tobytes(), k
    assert to_bytes(loaded, {"lr": 1e-3}) == path.read_bytes()


def test_round_trip_with_adapters(weights):
    adapted = attach_lora(weights, 2, 4.0, ["head", "blocks.0.fc1"])
    adapted.adapters["head"].up.data[:] = 0.25
    loaded, _ = from_bytes(to_bytes(adapted))
    assert loaded.adapter_config == {"rank": 2, "alpha": 4.0, "targets": ["head", "blocks.0.fc1"]}
    assert np.array_equal(loaded.adapters["head"].up.data, adapted.adapters["head"].up.data)
    assert loaded.adapters["head"].scale == 2.0
    assert not any(p.requires_grad for p in loaded.params.values())


def test_truncated_payload_rejected(weights):
    blob = to_bytes(weights)
    with pytest.raises(CorruptCheckpointError):
        from_bytes(blob[:-1])


def test_truncated_header_rejected(weights):
    with pytest.raises(CorruptCheckpointError):
        from_bytes(to_bytes(weights)[:40])


def test_bad_magic_has_distinct_error(weights):
    blob = bytearray(to_bytes(weights))
    blob[0] ^= 0xFF
    with pytest.raises(BadMagicError):
        from_bytes(bytes(blob))
    assert not issubclass(BadMagicError, CorruptCheckpointError)


def test_overlapping_offsets_rejected(weights):
    blob = bytearray(to_bytes(weights))
    # locate the second directory entry's offset field and point it at 0
    pos = len(MAGIC)
    (cfg_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4 + cfg_len + 4
    for entry in range(2):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2 + name_len + 4
        ndim = blob[pos]
        pos += 1 + 4 * ndim
        if entry == 1:
            struct.pack_into("<Q", blob, pos, 0)
        pos += 8
    with pytest.raises(CorruptCheckpointError, match="overlap"):
        from_bytes(bytes(blob))


def test_trailing_bytes_rejected(weights):
    with pytest.raises(CorruptCheckpointError):
        from_bytes(to_bytes(weights) + b"\0\0\0\0")
