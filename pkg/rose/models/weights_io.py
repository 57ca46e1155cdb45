"""
ROSEW weights file format.

    magic   b"ROSEW"
    version u8 (0x01)
    count   u32 little-endian
    count x tensor:
        u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
        prod(dims) x f32 little-endian values (row-major)

Tensors are written in NetworkWeights order. Values are stored as float32, so float32
weights round-trip bit-exactly.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from rose.errors import (
    BadMagicError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
    WeightsFormatError,
)
from rose.models.network import NetworkConfig, NetworkWeights, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b'ROSEW'
VERSION = 1


def encode_weights(weights: NetworkWeights) -> bytes:
    chunks = [MAGIC, struct.pack('<B', VERSION), struct.pack('<I', len(weights))]
    for name, tensor in weights.items():
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', tensor.ndim))
        chunks.append(struct.pack(f'<{tensor.ndim}I', *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor, dtype='<f4').tobytes())
    return b''.join(chunks)


def save_weights(weights: NetworkWeights, path: Union[str, Path]) -> Path:
    """Write weights to path in the ROSEW format and return the path."""
    path = Path(path)
    path.write_bytes(encode_weights(weights))
    logger.info(f"Saved {weights!r} to {path}")
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, tensor: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise TruncatedFileError(tensor)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, tensor: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), tensor))


def decode_weights(data: bytes, config: NetworkConfig = NetworkConfig()) -> NetworkWeights:
    """
    Decode a ROSEW payload and check it against the network layout of config.

    Raises:
        BadMagicError, VersionMismatchError, TruncatedFileError, ShapeMismatchError,
        WeightsFormatError (undecodable tensor name, trailing bytes)
    """
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(data[:len(MAGIC)])
    reader = _Reader(data)
    reader.take(len(MAGIC), '<header>')
    (version,) = reader.unpack('<B', '<header>')
    if version != VERSION:
        raise VersionMismatchError(version, VERSION)
    (count,) = reader.unpack('<I', '<header>')

    tensors: Dict[str, np.ndarray] = {}
    for index in range(count):
        placeholder = f'#{index}'
        (name_length,) = reader.unpack('<H', placeholder)
        try:
            name = reader.take(name_length, placeholder).decode('utf-8')
        except UnicodeDecodeError as e:
            raise WeightsFormatError(f"tensor {placeholder} has a name that is not valid UTF-8") from e
        (ndim,) = reader.unpack('<B', name)
        dims = reader.unpack(f'<{ndim}I', name) if ndim else ()
        values = reader.take(4 * int(np.prod(dims, dtype=np.int64)), name)
        tensors[name] = np.frombuffer(values, dtype='<f4').astype(np.float32).reshape(dims)
    if reader.offset != len(data):
        raise WeightsFormatError(f"{len(data) - reader.offset} trailing bytes after the last tensor")

    expected = parameter_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise ShapeMismatchError(name, shape, None)
        if tensors[name].shape != shape:
            raise ShapeMismatchError(name, shape, tensors[name].shape)
    for name, tensor in tensors.items():
        if name not in expected:
            raise ShapeMismatchError(name, None, tensor.shape)
    if list(tensors) != list(expected):
        raise ShapeMismatchError('<order>', None, None)

    weights = NetworkWeights(tensors, config)
    weights.validate()
    return weights


def load_weights(path: Union[str, Path], config: NetworkConfig = NetworkConfig()) -> NetworkWeights:
    path = Path(path)
    weights = decode_weights(path.read_bytes(), config)
    logger.info(f"Loaded {weights!r} from {path}")
    return weights
