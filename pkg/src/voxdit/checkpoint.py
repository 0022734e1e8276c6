"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"FD3D" | version | json_len | json (UTF-8) |
    repeated: name_len | name (UTF-8) | rank | dim_0 .. dim_{rank-1} | f32 data

The JSON document holds ``{"model": <ModelConfig>, "state": {...}}``; ``state``
carries trainer bookkeeping (seed, step, Adam step) so a run can resume.
Extra tensors such as optimizer moments are stored as ordinary records with
a ``"<prefix>/"`` name prefix.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import MaskedVoxelDiT, ModelConfig

MAGIC = b"FD3D"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_tensor(name: str, t: torch.Tensor) -> bytes:
    arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(model: MaskedVoxelDiT, path: str | Path, state: dict | None = None,
                    extra: dict[str, torch.Tensor] | None = None) -> None:
    doc = json.dumps({"model": model.config.to_dict(), "state": state or {}}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(doc)), doc]
    for name, p in model.state_dict().items():
        parts.append(_pack_tensor(name, p))
    for name, t in (extra or {}).items():
        parts.append(_pack_tensor(name, t))
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (json document, name -> float32 array)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, jlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    doc = json.loads(raw[pos:pos + jlen].decode("utf-8"))
    pos += jlen
    tensors: dict[str, np.ndarray] = {}
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    return doc, tensors


def load_checkpoint(path: str | Path, config: ModelConfig | None = None
                    ) -> tuple[MaskedVoxelDiT, dict, dict[str, np.ndarray]]:
    """Rebuild the model; returns (model, state, extra tensors).

    If ``config`` is given, the stored architecture must match it.
    """
    doc, tensors = read_checkpoint(path)
    stored = ModelConfig.from_dict(doc["model"])
    if config is not None and config.to_dict() != stored.to_dict():
        diff = sorted(k for k, v in config.to_dict().items() if stored.to_dict()[k] != v)
        raise CheckpointError(f"config mismatch: {', '.join(diff)}")
    model = MaskedVoxelDiT(stored)
    own = model.state_dict()
    loaded = {}
    for name, ref in own.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        arr = tensors.pop(name)
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tuple(ref.shape)}")
        loaded[name] = torch.from_numpy(arr)
    model.load_state_dict(loaded)
    return model, doc.get("state", {}), tensors
