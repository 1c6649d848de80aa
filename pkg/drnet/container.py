"""The DRCNN1 container shared by float models, checkpoints and quantized models.

Layout (all integers little-endian)::

    magic 'DRCNN1' | version u8 | kind u8 ('F' or 'Q')
    architecture: u32 length + UTF-8 text
    u32 tensor count, then per tensor:
        u16 name length + name | u8 tag length + dtype tag | u8 ndim | u32 dims | payload
    u32 quantization-record count, then per record:
        u16 name length + name | scale f64 | zero_point i32
"""
import struct
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from drnet.errors import ContainerError

MAGIC = b'DRCNN1'
VERSION = 1
KIND_FLOAT = 'F'
KIND_QUANT = 'Q'

DTYPES = {
    'f32': np.dtype('<f4'),
    'f64': np.dtype('<f8'),
    'i8': np.dtype('i1'),
    'i32': np.dtype('<i4'),
}


def _tag(dtype):
    for tag, candidate in DTYPES.items():
        if dtype.kind == candidate.kind and dtype.itemsize == candidate.itemsize:
            return tag
    return None


@dataclass
class Container:
    """Decoded container contents.

    Args:
        kind (string): ``'F'`` for a float model, ``'Q'`` for a quantized model
        architecture (string): Canonical architecture text
        tensors (dict): Name to array
        qparams (dict): Name to (scale, zero_point)
        size (int): Encoded size in bytes
    """
    kind: str
    architecture: str
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    qparams: Dict[str, Tuple[float, int]] = field(default_factory=dict)
    size: int = 0


def _name(name):
    raw = name.encode('utf-8')
    return struct.pack('<H', len(raw)) + raw


def encode_container(kind, architecture, tensors, qparams=None):
    """Serializes a container.

    Args:
        kind (string): ``'F'`` or ``'Q'``
        architecture (string): Canonical architecture text
        tensors (dict): Name to array; dtypes must be float32, float64, int8 or int32
        qparams (dict): Name to (scale, zero_point). Defaults to none.

    Returns:
        bytes: The encoded container
    """
    if kind not in (KIND_FLOAT, KIND_QUANT):
        raise ContainerError(f'Unknown container kind {kind!r}.')
    parts = [MAGIC, struct.pack('<B', VERSION), kind.encode('ascii')]
    arch = architecture.encode('utf-8')
    parts += [struct.pack('<I', len(arch)), arch, struct.pack('<I', len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value)
        tag = _tag(value.dtype)
        if tag is None:
            raise ContainerError(f'Tensor {name!r} has unsupported dtype {value.dtype}.')
        parts += [_name(name), struct.pack('<B', len(tag)), tag.encode('ascii'),
                  struct.pack('<B', value.ndim), struct.pack(f'<{value.ndim}I', *value.shape),
                  np.ascontiguousarray(value, dtype=DTYPES[tag]).tobytes()]
    qparams = qparams or {}
    parts.append(struct.pack('<I', len(qparams)))
    for name, (scale, zero_point) in qparams.items():
        parts += [_name(name), struct.pack('<di', float(scale), int(zero_point))]
    return b''.join(parts)


class _Reader:

    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.data):
            raise ContainerError('Truncated container.')
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (length,) = self.unpack('<H')
        return self.take(length).decode('utf-8')


def decode_container(data):
    """Parses an encoded container.

    Args:
        data (bytes): Encoded container

    Returns:
        Container: The decoded contents
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise ContainerError('Not a DRCNN1 container.')
    (version,) = reader.unpack('<B')
    if version != VERSION:
        raise ContainerError(f'Unsupported container version {version}.')
    kind = reader.take(1).decode('ascii')
    if kind not in (KIND_FLOAT, KIND_QUANT):
        raise ContainerError(f'Unknown container kind {kind!r}.')
    (arch_length,) = reader.unpack('<I')
    container = Container(kind, reader.take(arch_length).decode('utf-8'))
    (count,) = reader.unpack('<I')
    for _ in range(count):
        name = reader.name()
        (tag_length,) = reader.unpack('<B')
        tag = reader.take(tag_length).decode('ascii')
        if tag not in DTYPES:
            raise ContainerError(f'Tensor {name!r} has unknown dtype tag {tag!r}.')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I')
        dtype = DTYPES[tag]
        payload = reader.take(int(np.prod(shape)) * dtype.itemsize)
        container.tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
    (count,) = reader.unpack('<I')
    for _ in range(count):
        name = reader.name()
        container.qparams[name] = reader.unpack('<di')
    if reader.offset != len(data):
        raise ContainerError('Trailing bytes after the container.')
    container.size = len(data)
    return container


def write_container(path, kind, architecture, tensors, qparams=None):
    """Writes a container file.

    Returns:
        int: Number of bytes written
    """
    data = encode_container(kind, architecture, tensors, qparams)
    with open(path, 'wb') as handle:
        handle.write(data)
    return len(data)


def read_container(path):
    """Reads a container file.

    Returns:
        Container: The decoded contents
    """
    with open(path, 'rb') as handle:
        return decode_container(handle.read())


def container_kind(path):
    """Reads only the header of a container file and returns its kind byte."""
    with open(path, 'rb') as handle:
        header = handle.read(len(MAGIC) + 2)
    if len(header) < len(MAGIC) + 2 or header[:len(MAGIC)] != MAGIC:
        raise ContainerError(f'{path} is not a DRCNN1 container.')
    kind = header[-1:].decode('ascii', errors='replace')
    if kind not in (KIND_FLOAT, KIND_QUANT):
        raise ContainerError(f'Unknown container kind {kind!r}.')
    return kind
