"""Binary checkpoint container.

Layout::

    b"SCICKPT\\0"  | u32 version | u64 header length | JSON header | payload

The header holds free-form metadata (config echo, label tables, optimiser
scalars) and a section table mapping ``section -> key -> {shape, offset}``.
Every array is stored as little-endian float32, row-major, at its offset
from the start of the payload. Serialisation is deterministic: the same
content always produces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .errors import CheckpointError, VersionMismatchError

MAGIC = b"SCICKPT\0"
VERSION = 1
SECTIONS = ("encoders", "prompt_bank", "sim", "heads", "text_features", "optimizer")

_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    sections: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    meta: Dict = field(default_factory=dict)

    def section(self, name: str) -> Dict[str, np.ndarray]:
        try:
            return self.sections[name]
        except KeyError:
            raise CheckpointError(f"checkpoint has no section {name!r}") from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.meta != other.meta or set(self.sections) != set(other.sections):
            return False
        for name, arrays in self.sections.items():
            theirs = other.sections[name]
            if set(arrays) != set(theirs):
                return False
            for key, arr in arrays.items():
                a, b = _as_f32(arr), _as_f32(theirs[key])
                if a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
        return True


def _as_f32(arr) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype="<f4")


def to_bytes(ckpt: Checkpoint) -> bytes:
    table: Dict[str, Dict[str, dict]] = {}
    chunks = []
    offset = 0
    for name in sorted(ckpt.sections):
        table[name] = {}
        for key in sorted(ckpt.sections[name]):
            arr = _as_f32(ckpt.sections[name][key])
            table[name][key] = {"shape": list(arr.shape), "offset": offset}
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps({"meta": ckpt.meta, "sections": table, "payload_bytes": offset},
                        sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("checkpoint too short to hold a header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} unsupported (expected {VERSION})")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode())
        table = header["sections"]
        total = int(header["payload_bytes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = raw[start + hlen:]
    if len(payload) != total:
        raise CheckpointError(f"payload holds {len(payload)} bytes, header declares {total}")
    sections: Dict[str, Dict[str, np.ndarray]] = {}
    for name, entries in table.items():
        sections[name] = {}
        for key, info in entries.items():
            shape = tuple(int(s) for s in info["shape"])
            off = int(info["offset"])
            n = int(np.prod(shape, dtype=np.int64))
            if off < 0 or off + 4 * n > total:
                raise CheckpointError(f"{name}/{key} lies outside the payload")
            arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape)
            sections[name][key] = arr.astype(np.float32)
    return Checkpoint(sections, header.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path: Union[str, os.PathLike]) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: Union[str, os.PathLike]) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint at {path}") from exc
    return from_bytes(raw)


def file_sha256(path: Union[str, os.PathLike]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
