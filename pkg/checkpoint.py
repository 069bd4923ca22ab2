"""Binary checkpoint format.

Layout (little-endian):
    magic      8 bytes  b"GASACKPT"
    version    u32
    config     u32 length + UTF-8 JSON {"model": ModelConfig, "meta": {...}}
    count      u32
    per parameter:
        u32 name length, name (UTF-8), u32 rank, rank x u32 dims, float32 payload
"""
import json
import os
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from config import ModelConfig
from errors import CheckpointFormatError, CheckpointShapeError
from gasa import GasaModel

MAGIC = b"GASACKPT"
VERSION = 1


def encode_checkpoint(model: GasaModel, meta: Optional[Dict] = None,
                      state: Optional[Dict[str, np.ndarray]] = None) -> bytes:
    """Serialize `model`; `state` (name -> array) replaces the live parameter values when given."""
    header = json.dumps({"model": model.config.model_dump(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    params = model.parameters()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(params))]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        value = np.ascontiguousarray(tensor.value if state is None else state[name], dtype="<f4")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


def save_checkpoint(path: str, model: GasaModel, meta: Optional[Dict] = None,
                    state: Optional[Dict[str, np.ndarray]] = None) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_checkpoint(model, meta, state))
    return path


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise CheckpointFormatError(f"{self.source}: truncated at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Tuple[ModelConfig, Dict, Dict[str, np.ndarray]]:
    reader = _Reader(data, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{source}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
        config = ModelConfig.model_validate(header["model"])
    except (ValueError, KeyError) as e:
        raise CheckpointFormatError(f"{source}: unreadable config block ({e})") from e
    state = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).copy()
    if reader.offset != len(data):
        raise CheckpointFormatError(f"{source}: {len(data) - reader.offset} trailing bytes")
    return config, header.get("meta", {}), state


def load_checkpoint(path: str) -> Tuple[GasaModel, Dict]:
    """Rebuild the model a checkpoint describes and load its weights."""
    if not os.path.exists(path):
        raise CheckpointFormatError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        config, meta, state = decode_checkpoint(f.read(), path)
    model = GasaModel(config, seed=0)
    expected = {name: p.shape for name, p in model.parameters().items()}
    missing = sorted(set(expected) - set(state))
    extra = sorted(set(state) - set(expected))
    if missing or extra:
        raise CheckpointShapeError(f"{path}: missing parameters {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in expected.items():
        if state[name].shape != shape:
            raise CheckpointShapeError(
                f"{path}: parameter {name} has shape {state[name].shape}, config implies {shape}"
            )
    model.load_state_dict(state)
    return model, meta
