"""Binary checkpoint format.

Layout, little-endian throughout:

    b"PBEU" | u32 version | 32-byte config digest
    u32 length | RunConfig JSON (utf-8)
    u64 iteration | u32 entry count
    per entry: u32 name length | name | u8 kind | u8 ndim | u32 dims... | f32 data
"""
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from pbeunet.errors import CheckpointError
from pbeunet.layers import ModuleParams
from pbeunet.models import RunConfig
from pbeunet.tensor import Tensor

MAGIC = b"PBEU"
VERSION = 1
KIND_LEARNABLE = 0
KIND_BUFFER = 1
KIND_VELOCITY = 2


class CheckpointState(BaseModel):
    """Everything needed to resume training or run inference."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: RunConfig
    params: ModuleParams
    velocity: Dict[str, np.ndarray] = Field(default_factory=dict)
    iteration: int = 0


def _entry(name: str, kind: int, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    header = struct.pack("<I", len(encoded)) + encoded + struct.pack("<BB", kind, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def encode_checkpoint(state: CheckpointState) -> bytes:
    entries = [
        _entry(name, KIND_LEARNABLE if learnable else KIND_BUFFER, tensor.data)
        for name, tensor, learnable in state.params
    ]
    entries += [_entry(name, KIND_VELOCITY, array) for name, array in state.velocity.items()]
    config_json = state.config.canonical_json().encode("utf-8")
    head = MAGIC + struct.pack("<I", VERSION) + state.config.digest()
    head += struct.pack("<I", len(config_json)) + config_json
    head += struct.pack("<QI", state.iteration, len(entries))
    return head + b"".join(entries)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte offset {self.pos}")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> CheckpointState:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise CheckpointError("not a PBEU checkpoint")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = reader.take(32)
    (length,) = reader.unpack("<I")
    config = RunConfig.model_validate_json(reader.take(length))
    if config.digest() != digest:
        raise CheckpointError("config digest does not match the stored configuration")
    iteration, count = reader.unpack("<QI")

    params = ModuleParams()
    velocity: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<I")
        name = reader.take(name_length).decode("utf-8")
        kind, ndim = reader.unpack("<BB")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape))
        array = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if kind == KIND_VELOCITY:
            velocity[name] = array
        elif kind in (KIND_LEARNABLE, KIND_BUFFER):
            params.add(name, Tensor(array), learnable=kind == KIND_LEARNABLE)
        else:
            raise CheckpointError(f"unknown entry kind {kind} for {name!r}")
    if reader.pos != len(data):
        raise CheckpointError(f"{len(data) - reader.pos} trailing bytes after the last entry")
    return CheckpointState(config=config, params=params, velocity=velocity, iteration=iteration)


def save_checkpoint(path: Union[str, Path], state: CheckpointState) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(state))
    return path


def load_checkpoint(path: Union[str, Path]) -> CheckpointState:
    return decode_checkpoint(Path(path).read_bytes())
