"""Binary checkpoint format for model parameters.

Layout (little-endian)::

    b"CXRT" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | float32 data (row-major)

Only parameters are stored; optimizer accumulators start from zero after a
load.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .neuralnet import ArchSpec, HyperParams, ModelState, param_shapes, state_from_params

MAGIC = b"CXRT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state.params))]
    for name, arr in state.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Parse every tensor; nothing is returned unless the whole file is valid."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint (needed {n} bytes at offset {pos})")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: tensor name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after last tensor")
    return tensors


def load_checkpoint(path: str | Path, hp: HyperParams, arch: ArchSpec,
                    freeze_depth: Optional[int] = None) -> ModelState:
    """Load parameters into a model of the given architecture.

    Raises ``CheckpointError`` naming the first tensor whose name or shape
    disagrees with ``arch``.
    """
    tensors = read_checkpoint(path)
    expected = param_shapes(arch, hp.fc_units)
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name} (expected shape {shape})")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, "
                                  f"architecture expects {shape}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]}")
    if freeze_depth is not None:
        hp = HyperParams(**{**hp.__dict__, "freeze_depth": freeze_depth})
    return state_from_params(arch, hp, {name: tensors[name] for name in expected})
