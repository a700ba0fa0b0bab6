"""Named-tensor checkpoint archive.

Layout::

    b"STCK" | version u32 | manifest length u64 | manifest (UTF-8 JSON) | payloads

The manifest holds ``tensors`` (name, shape, dtype, offset, length; offsets are
relative to the first payload byte), a free-form ``meta`` dict and the run
config echo as text. Each payload is one tensor in the single-tensor binary
format, so a checkpoint can be split with nothing but the tensor codec.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_io

MAGIC = b"STCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    config_text: str = ""

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors whose name starts with ``prefix``, with the prefix removed."""
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, payloads, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        blob = tensor_io.encode(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32" if arr.dtype == np.float32 else "f64",
                        "offset": offset, "length": len(blob)})
        payloads.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "meta": ckpt.meta, "config": ckpt.config_text},
                          sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(manifest)) + manifest + b"".join(payloads)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r} at byte 0")
    if len(buf) < 16:
        raise CheckpointError("truncated checkpoint header at byte 4")
    version, mlen = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4")
    base = 16 + mlen
    if len(buf) < base:
        raise CheckpointError(f"manifest of {mlen} bytes truncated at byte {len(buf)}")
    try:
        manifest = json.loads(buf[16:base].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest at byte 16: {exc}") from exc
    tensors = {}
    end = base
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        try:
            arr, end = tensor_io.decode(buf, start)
        except tensor_io.TensorFormatError as exc:
            raise CheckpointError(f"tensor {entry['name']!r}: {exc}") from exc
        if end - start != entry["length"] or list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"tensor {entry['name']!r} at byte {start} disagrees with its manifest entry")
        tensors[entry["name"]] = arr
    if end != len(buf):
        raise CheckpointError(f"{len(buf) - end} trailing bytes after byte {end}")
    return Checkpoint(tensors, manifest.get("meta", {}), manifest.get("config", ""))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
