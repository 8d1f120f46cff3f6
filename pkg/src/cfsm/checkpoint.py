"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"CFSMCKPT"              magic
    u32                      schema version
    u64 + bytes              JSON metadata header
    u32                      number of tensor records
    per record:
        u32 + bytes          JSON {"name", "dtype", "shape"}
        u64 + bytes          row-major little-endian data
    32 bytes                 SHA-256 of everything above
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CFSMCKPT"
SCHEMA_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4")}


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    metadata: dict = field(default_factory=dict)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def encode_rng_state(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def decode_rng_state(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def serialize(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.metadata)
    meta["schema_version"] = SCHEMA_VERSION
    header = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", SCHEMA_VERSION), struct.pack("<Q", len(header)), header,
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu()
        if t.dtype != torch.float32:
            raise CheckpointError(f"tensor {name} has dtype {t.dtype}; only float32 is stored")
        rec = json.dumps({"name": name, "dtype": "f32", "shape": list(t.shape)}).encode()
        data = t.contiguous().numpy().astype("<f4", copy=False).tobytes()
        parts += [struct.pack("<I", len(rec)), rec, struct.pack("<Q", len(data)), data]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def deserialize(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != SCHEMA_VERSION:
        raise VersionMismatchError(f"{source}: schema version {version}, expected {SCHEMA_VERSION}")
    if len(blob) < 32:
        raise ChecksumError(f"{source}: file truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch (file truncated or corrupted)")

    pos = len(MAGIC) + 4
    (hlen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    metadata = json.loads(body[pos:pos + hlen])
    pos += hlen
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(n):
        (rlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        rec = json.loads(body[pos:pos + rlen])
        pos += rlen
        (dlen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        dtype = _DTYPES[rec["dtype"]]
        arr = np.frombuffer(body[pos:pos + dlen], dtype=dtype).reshape(rec["shape"])
        pos += dlen
        tensors[rec["name"]] = torch.from_numpy(arr.astype(np.float32))
    return Checkpoint(tensors, metadata)


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, torch.Tensor], metadata: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = serialize(Checkpoint(tensors, metadata))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    return deserialize(path.read_bytes(), str(path))


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensors_hash(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return tensors_hash(module.state_dict())
