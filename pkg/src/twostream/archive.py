"""Portable binary tensor container ("STTA").

Layout, byte-exact:

    magic   4 bytes  b"STTA"
    version u32 LE   (currently 1)
    hlen    u64 LE   header byte length
    header  UTF-8 JSON: {"entries": [{"name", "dtype", "shape",
                         "offset", "length"}], "metadata": {str: str}}
    payload contiguous little-endian buffers; entry offsets are relative
            to the payload start

Only dtype "f32" exists. Entry names are unique; buffer length must equal
prod(shape) * 4. The container is deliberately trivial to parse from any
language.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"STTA"
VERSION = 1


class ArchiveError(ValueError):
    """Raised for structurally invalid archive files or contents."""


@dataclass
class TensorArchive:
    """Named float32 tensors plus string metadata."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, data: np.ndarray) -> None:
        if name in self.entries:
            raise ArchiveError(f"duplicate entry name {name!r}")
        self.entries[name] = np.ascontiguousarray(data, dtype="<f4")

    def require(self, name: str) -> np.ndarray:
        if name not in self.entries:
            raise ArchiveError(f"archive missing entry {name!r}")
        return self.entries[name]


def write_archive(archive: TensorArchive, path: str) -> None:
    names = list(archive.entries)
    if len(set(names)) != len(names):
        raise ArchiveError("duplicate entry names")
    header_entries = []
    offset = 0
    buffers = []
    for name in names:
        arr = np.ascontiguousarray(archive.entries[name], dtype="<f4")
        if arr.size == 0:
            raise ArchiveError(f"entry {name!r} is empty")
        raw = arr.tobytes()
        header_entries.append({
            "name": name,
            "dtype": "f32",
            "shape": [int(s) for s in arr.shape],
            "offset": offset,
            "length": len(raw),
        })
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"entries": header_entries, "metadata": dict(archive.metadata)},
        separators=(",", ":"), sort_keys=False,
    ).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for raw in buffers:
                fh.write(raw)
    except OSError as exc:
        raise ArchiveError(f"cannot write archive {path}: {exc}") from exc


def read_archive(path: str) -> TensorArchive:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ArchiveError(f"bad magic in {path}: not an STTA archive")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    hlen = struct.unpack_from("<Q", blob, 8)[0]
    header_start = 16
    if header_start + hlen > len(blob):
        raise ArchiveError(f"truncated header in {path}")
    try:
        header = json.loads(blob[header_start:header_start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"unparseable header in {path}: {exc}") from exc
    payload = blob[header_start + hlen:]
    archive = TensorArchive(metadata={str(k): str(v)
                                      for k, v in header.get("metadata", {}).items()})
    seen = set()
    for ent in header.get("entries", []):
        name = ent["name"]
        if name in seen:
            raise ArchiveError(f"duplicate entry name {name!r}")
        seen.add(name)
        if ent["dtype"] != "f32":
            raise ArchiveError(f"entry {name!r}: unsupported dtype {ent['dtype']!r}")
        shape = tuple(int(s) for s in ent["shape"])
        if any(s <= 0 for s in shape):
            raise ArchiveError(f"entry {name!r}: non-positive dimension in {shape}")
        length = int(ent["length"])
        expected = int(np.prod(shape)) * 4
        if length != expected:
            raise ArchiveError(
                f"entry {name!r}: shape/length mismatch ({length} bytes vs shape {shape})")
        off = int(ent["offset"])
        if off < 0 or off + length > len(payload):
            raise ArchiveError(f"entry {name!r}: truncated buffer")
        arr = np.frombuffer(payload, dtype="<f4", count=expected // 4, offset=off)
        archive.entries[name] = arr.reshape(shape).copy()
    return archive
