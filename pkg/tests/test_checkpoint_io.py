import struct

import numpy as np
import pytest

from firstlayer.engine import checkpoint_io
from firstlayer.engine.checkpoint_io import MAGIC, dumps, loads
from firstlayer.engine.model import ModelWeights, expected_shapes, forward_prefill
from firstlayer.engine.precompute import (
    TABLE_NAME,
    TransformedModel,
    eliminated_tensor_shapes,
    prefill_precomputed,
    table_width,
)
from firstlayer.errors import (
    BadMagicError,
    CheckpointError,
    DuplicateTensorError,
    ShapeMismatchError,
    TrailingDataError,
    TruncatedCheckpointError,
    VersionMismatchError,
)


def header_length(data):
    (blob_len,) = struct.unpack_from("<Q", data, 8)
    return 16 + blob_len


def first_tensor_length(data, start):
    (name_len,) = struct.unpack_from("<I", data, start)
    pos = start + 4 + name_len
    _, rank = struct.unpack_from("<BB", data, pos)
    dims = struct.unpack_from(f"<{rank}Q", data, pos + 2)
    return 4 + name_len + 2 + 8 * rank + int(np.prod(dims)) * 4


def test_baseline_round_trip(serial_weights):
    loaded = loads(dumps(serial_weights))
    assert isinstance(loaded, ModelWeights)
    assert loaded.config == serial_weights.config
    for name in expected_shapes(serial_weights.config):
        np.testing.assert_array_equal(loaded[name], serial_weights[name])


def test_transformed_round_trip(parallel_transformed):
    loaded = loads(dumps(parallel_transformed))
    assert isinstance(loaded, TransformedModel)
    assert loaded.config.precomputed
    assert set(loaded.tensors) == set(parallel_transformed.tensors)
    tokens = [7, 0, 96, 31, 31, 2]
    a, _ = prefill_precomputed(parallel_transformed, tokens)
    b, _ = prefill_precomputed(loaded, tokens)
    np.testing.assert_array_equal(a, b)


def entry_header_length(name, shape):
    return 4 + len(name.encode("utf-8")) + 2 + 8 * len(shape)


@pytest.mark.parametrize("name", ["serial", "parallel", "moe"])
def test_transformed_size_delta(request, name):
    config = request.getfixturevalue(f"{name}_config")
    weights = request.getfixturevalue(f"{name}_weights")
    transformed = request.getfixturevalue(f"{name}_transformed")
    d, e, vocab = config.dim, config.kv_dim, config.vocab_size
    delta = len(dumps(transformed)) - len(dumps(weights))

    scalars = ((d + 2 * e) * vocab - transformed.eliminated_actual) * 4
    bookkeeping = (
        entry_header_length(TABLE_NAME, (vocab, table_width(config)))
        - entry_header_length("embed.in", (vocab, d))
        - sum(entry_header_length(n, s) for n, s in eliminated_tensor_shapes(config).items())
        + len(transformed.config.to_json()) - len(config.to_json())
    )
    assert delta == scalars + bookkeeping
    assert abs(bookkeeping) < 1024


def test_save_load_file(tmp_path, serial_config, serial_weights):
    path = tmp_path / "toy.l1pc"
    size = checkpoint_io.save(serial_weights, str(path))
    assert path.stat().st_size == size
    loaded = checkpoint_io.load(str(path))
    a, _ = forward_prefill(serial_config, serial_weights, [1, 2, 3])
    b, _ = forward_prefill(serial_config, loaded, [1, 2, 3])
    np.testing.assert_array_equal(a, b)


def test_bytes_are_deterministic(serial_weights):
    assert dumps(serial_weights) == dumps(loads(dumps(serial_weights)))


def test_layout(serial_weights):
    data = dumps(serial_weights)
    assert data[:4] == MAGIC
    assert struct.unpack_from("<I", data, 4) == (1,)
    start = header_length(data)
    (name_len,) = struct.unpack_from("<I", data, start)
    assert data[start + 4:start + 4 + name_len] == b"embed.in"


def test_bad_magic(serial_weights):
    data = b"XXXX" + dumps(serial_weights)[4:]
    with pytest.raises(BadMagicError):
        loads(data)


def test_version_mismatch(serial_weights):
    data = bytearray(dumps(serial_weights))
    struct.pack_into("<I", data, 4, 2)
    with pytest.raises(VersionMismatchError):
        loads(bytes(data))


@pytest.mark.parametrize("cut", [3, 10, 20, 200, -1])
def test_truncated(serial_weights, cut):
    data = dumps(serial_weights)
    with pytest.raises(TruncatedCheckpointError):
        loads(data[:cut])


def test_truncated_between_tensors(serial_weights):
    data = dumps(serial_weights)
    start = header_length(data)
    end = start + first_tensor_length(data, start)
    with pytest.raises(TruncatedCheckpointError):
        loads(data[:end])


def test_trailing_data(serial_weights):
    with pytest.raises(TrailingDataError):
        loads(dumps(serial_weights) + b"\x00")


def test_duplicate_tensor(serial_weights):
    data = dumps(serial_weights)
    start = header_length(data)
    first = data[start:start + first_tensor_length(data, start)]
    with pytest.raises(DuplicateTensorError):
        loads(data[:start] + first + first + data[start + len(first):])


def test_shape_mismatch(serial_weights):
    data = bytearray(dumps(serial_weights))
    start = header_length(data)
    (name_len,) = struct.unpack_from("<I", data, start)
    # embed.in stored as [97 x 64]; claim [64 x 97] instead
    struct.pack_into("<QQ", data, start + 4 + name_len + 2, 64, 97)
    with pytest.raises(ShapeMismatchError):
        loads(bytes(data))


def test_unknown_dtype(serial_weights):
    data = bytearray(dumps(serial_weights))
    start = header_length(data)
    (name_len,) = struct.unpack_from("<I", data, start)
    data[start + 4 + name_len] = 1
    with pytest.raises(ShapeMismatchError):
        loads(bytes(data))


def test_unreadable_config(serial_weights):
    data = bytearray(dumps(serial_weights))
    data[16] = ord("[")
    with pytest.raises(CheckpointError):
        loads(bytes(data))


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        checkpoint_io.load(str(tmp_path / "nope.l1pc"))
