"""
Checkpoint persistence.

File layout (all integers little-endian u32):

    b'DFTM' | version | header length | header (UTF-8 key=value lines)
    | tensor count | per tensor: name length, name, rank, dims..., float32 data
    | CRC32 of every preceding byte
"""

import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional

import numpy as np

from .transformer import ModelConfig, ParameterSet
from .numcore import Tensor

logger = logging.getLogger(__name__)

MAGIC = b'DFTM'
FORMAT_VERSION = 1
TENSOR_DTYPE = np.dtype('<f4')


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or corrupted checkpoint files."""


class CheckpointVersionError(CheckpointError):
    """Raised for checkpoints written by a newer format version."""


class PretrainTag(str, Enum):
    """Lineage of a set of weights: the pretraining objective they descend from."""

    AR = 'ar'
    MLM = 'mlm'
    NONE = 'none'


@dataclass
class Checkpoint:
    config: ModelConfig
    tag: PretrainTag
    params: Dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    framework: Optional[str] = None
    version: int = FORMAT_VERSION
    extra: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.tag = PretrainTag(self.tag)
        self.params = {name: np.asarray(value.data if isinstance(value, Tensor) else value, dtype=TENSOR_DTYPE)
                       for name, value in self.params.items()}

    def parameter_set(self) -> ParameterSet:
        """Trainable float32 tensors for the stored arrays."""
        return ParameterSet({name: Tensor(arr.copy(), requires_grad=True, name=name)
                             for name, arr in self.params.items()})

    def header(self) -> Dict[str, str]:
        values = {f'config.{k}': str(v) for k, v in self.config.to_dict().items()}
        values.update({'tag': self.tag.value, 'step': str(self.step), 'seed': str(self.seed)})
        if self.framework:
            values['framework'] = self.framework
        values.update({f'extra.{k}': v for k, v in self.extra.items()})
        return values

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.header() == other.header()
            and self.version == other.version
            and list(self.params) == list(other.params)
            and all(self.params[k].tobytes() == other.params[k].tobytes()
                    and self.params[k].shape == other.params[k].shape for k in self.params)
        )


def _u32(value: int) -> bytes:
    return struct.pack('<I', value)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = ''.join(f'{k}={v}\n' for k, v in ckpt.header().items()).encode('utf-8')
    parts = [MAGIC, _u32(ckpt.version), _u32(len(header)), header, _u32(len(ckpt.params))]
    for name, arr in ckpt.params.items():
        encoded = name.encode('utf-8')
        parts += [_u32(len(encoded)), encoded, _u32(arr.ndim)]
        parts += [_u32(dim) for dim in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=TENSOR_DTYPE).tobytes())
    body = b''.join(parts)
    return body + _u32(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError("checkpoint file is truncated")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack('<I', self.take(4))[0]


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes; nothing is returned unless the whole file is valid.

    Raises:
        CheckpointVersionError: For a newer format version
        CheckpointError: On a bad magic, truncation or checksum failure
    """
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    version = struct.unpack('<I', data[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    body, stored = data[:-4], struct.unpack('<I', data[-4:])[0]
    if zlib.crc32(body) != stored:
        raise CheckpointError("checkpoint checksum mismatch")

    reader = _Reader(body)
    reader.take(8)
    try:
        header_lines = reader.take(reader.u32()).decode('utf-8').splitlines()
        header = dict(line.split('=', 1) for line in header_lines if line)
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}") from e

    params: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode('utf-8')
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(reader.take(count * TENSOR_DTYPE.itemsize), dtype=TENSOR_DTYPE).reshape(shape).copy()
    if reader.offset != len(body):
        raise CheckpointError("trailing bytes after the last tensor")

    try:
        config = ModelConfig.from_dict({k[len('config.'):]: v for k, v in header.items() if k.startswith('config.')})
        return Checkpoint(
            config=config,
            tag=PretrainTag(header['tag']),
            params=params,
            step=int(header['step']),
            seed=int(header['seed']),
            framework=header.get('framework'),
            version=version,
            extra={k[len('extra.'):]: v for k, v in header.items() if k.startswith('extra.')},
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"invalid checkpoint header: {e}") from e


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """
    Write a checkpoint atomically (temporary file, then rename).

    Args:
        ckpt: Checkpoint to write
        path: Destination path
    """
    data = encode_checkpoint(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.ckpt-')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp_path, path)
    except OSError:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.info(f"Saved checkpoint ({ckpt.tag.value}, step {ckpt.step}) to {path}")


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointError: If the file is corrupted or from another format version
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint file not found at {path}")
    with open(path, 'rb') as f:
        ckpt = decode_checkpoint(f.read())
    logger.debug(f"Loaded checkpoint {path}: {len(ckpt.params)} tensors, tag {ckpt.tag.value}")
    return ckpt
