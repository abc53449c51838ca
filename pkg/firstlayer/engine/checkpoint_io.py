"""
Binary checkpoint format ("L1PC", version 1)

All integers little-endian.

    offset  size        field
    0       4           magic b"L1PC"
    4       4  u32      format version (1)
    8       8  u64      config length N
    16      N           UTF-8 JSON of ModelConfig (sorted keys, incl. "precomputed")
    ...                 tensor entries until end of file:
              4  u32    name length L
              L         UTF-8 tensor name
              1  u8     dtype tag (0 = float32 IEEE-754)
              1  u8     rank R
              8R u64    dims
              ...       raw little-endian payload, prod(dims) * 4 bytes

The file ends exactly after the last tensor. Tensors are written in the
canonical order of the config's tensor set, so saving the same model twice
gives identical bytes. A precomputed file stores "layer0.precompute"
[vocab × 2(d+e)] with columns [q | k | v | skip] and none of the tensors it
replaces.
"""

import logging
import math
import struct

import numpy as np

from ..errors import (
    BadMagicError,
    ConfigError,
    DuplicateTensorError,
    ShapeMismatchError,
    TrailingDataError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .model import ModelConfig, ModelWeights, expected_shapes
from .precompute import TransformedModel, transformed_shapes

logger = logging.getLogger(__name__)

MAGIC = b"L1PC"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0
_LE_FLOAT32 = np.dtype("<f4")


def _shapes_for(config):
    return transformed_shapes(config) if config.precomputed else expected_shapes(config)


def dumps(model):
    """Serializes ModelWeights or TransformedModel to bytes."""
    config = model.config
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    blob = config.to_json().encode("utf-8")
    parts.append(struct.pack("<Q", len(blob)))
    parts.append(blob)
    for name in _shapes_for(config):
        tensor = model.tensors[name]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", DTYPE_FLOAT32, tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype=_LE_FLOAT32).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"file ends inside {what} (need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    @property
    def at_end(self):
        return self.pos == len(self.data)


def loads(data):
    """Parses bytes into ModelWeights or TransformedModel; never returns a partial model."""
    reader = _Reader(data)
    magic = bytes(reader.take(4, "magic"))
    if magic != MAGIC:
        raise BadMagicError(f"not an L1PC checkpoint (magic {magic!r})")
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this reader supports {FORMAT_VERSION}")
    (blob_len,) = reader.unpack("<Q", "config length")
    blob = bytes(reader.take(blob_len, "config"))
    try:
        config = ModelConfig.from_json(blob.decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise ShapeMismatchError(f"unreadable config: {exc}") from exc

    shapes = _shapes_for(config)
    tensors = {}
    # read until every expected tensor has arrived
    while len(tensors) < len(shapes):
        if reader.at_end:
            raise TruncatedCheckpointError(
                f"file ends after {len(tensors)} of {len(shapes)} tensors")
        (name_len,) = reader.unpack("<I", "tensor name length")
        name = bytes(reader.take(name_len, "tensor name")).decode("utf-8", errors="replace")
        dtype, rank = reader.unpack("<BB", f"header of {name}")
        if dtype != DTYPE_FLOAT32:
            raise ShapeMismatchError(f"{name}: unsupported dtype tag {dtype}")
        dims = reader.unpack(f"<{rank}Q", f"dims of {name}")
        if name in tensors:
            raise DuplicateTensorError(f"tensor {name} appears twice")
        if name not in shapes:
            raise ShapeMismatchError(f"unexpected tensor {name} for this config")
        if tuple(dims) != tuple(shapes[name]):
            raise ShapeMismatchError(f"{name}: stored shape {tuple(dims)}, config says {shapes[name]}")
        payload = reader.take(math.prod(dims) * 4, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype=_LE_FLOAT32).astype(np.float32).reshape(dims)
    if not reader.at_end:
        raise TrailingDataError("bytes after the last tensor")

    if config.precomputed:
        return TransformedModel(config, tensors)
    return ModelWeights(config, tensors)


def save(model, path):
    data = dumps(model)
    with open(path, "wb") as f:
        f.write(data)
    logger.debug("saved %s checkpoint %s (%d bytes)",
                 "precomputed" if model.config.precomputed else "baseline", path, len(data))
    return len(data)


def load(path):
    with open(path, "rb") as f:
        data = f.read()
    model = loads(data)
    logger.debug("loaded %s (%s, %d tensors)", path, model.config.name, len(model.tensors))
    return model
