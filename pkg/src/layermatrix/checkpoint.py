"""Versioned binary checkpoints of named little-endian tensors.

Layout::

    b"MXNCKPT\\0"  magic (8 bytes)
    uint32 LE      format version
    uint64 LE      header length in bytes
    header         UTF-8 JSON, sorted keys, no whitespace
    payload        tensors back to back, in header order, little-endian C order

The header records config, counters and RNG state, and for every tensor
its name, dtype, shape, byte offset and size.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"MXNCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: dict[str, Any]
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)  # epoch, step, adam_t, seed, rng_state, ...

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for group, arrays in (("param", self.params), ("optim", self.optimizer)):
            for name in sorted(arrays):
                arr = np.asarray(arrays[name])
                le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
                raw = np.ascontiguousarray(le).tobytes()
                entries.append({"group": group, "name": name, "dtype": le.dtype.str,
                                "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
                blobs.append(raw)
                offset += len(raw)
        header = {"format_version": FORMAT_VERSION, "config": self.config, "meta": self.meta, "tensors": entries}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if len(buf) < 20:
            raise CheckpointError("truncated checkpoint header")
        version, hlen = struct.unpack("<IQ", buf[8:20])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(buf[20:20 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        base = 20 + hlen
        params, optim = {}, {}
        for e in header["tensors"]:
            start = base + e["offset"]
            if start + e["nbytes"] > len(buf):
                raise CheckpointError(f"truncated payload for tensor '{e['name']}'")
            arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                                offset=start).reshape(e["shape"])
            arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
            (params if e["group"] == "param" else optim)[e["name"]] = arr
        return cls(header["config"], params, optim, header["meta"])


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from exc
    return Checkpoint.from_bytes(buf)
