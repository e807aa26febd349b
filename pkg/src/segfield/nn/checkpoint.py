"""Checkpoint container: magic, canonical JSON manifest, raw f64 payloads.

Layout: b"SNN1" | u32le manifest length | manifest bytes | payload.
The manifest is canonical JSON (sorted keys, no whitespace) listing each
parameter's name, shape and byte offset into the payload, plus a free
"meta" object for configs.  Arrays are stored little-endian float64 in
listed order, so save(load(x)) == x byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"SNN1"


class CheckpointError(Exception):
    """Raised for unreadable or inconsistent checkpoint files."""


def save_arrays(path, named_arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payload = bytearray()
    for name, arr in named_arrays.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(a.shape), "offset": len(payload)})
        payload += a.astype("<f8").tobytes()
    manifest = json.dumps(
        {"meta": meta or {}, "params": entries}, sort_keys=True, separators=(",", ":")
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        fh.write(payload)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    (mlen,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[8 : 8 + mlen])
        entries = manifest["params"]
        meta = manifest["meta"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: bad manifest ({e})") from e
    payload = raw[8 + mlen :]
    out: dict[str, np.ndarray] = {}
    end = 0
    for ent in entries:
        try:
            name, shape, offset = ent["name"], tuple(ent["shape"]), int(ent["offset"])
        except (KeyError, TypeError) as e:
            raise CheckpointError(f"{path}: bad manifest entry {ent}") from e
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        stop = offset + 8 * count
        if stop > len(payload):
            raise CheckpointError(f"{path}: payload for {name!r} runs past end of file")
        out[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        end = max(end, stop)
    if end != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - end} trailing payload bytes")
    return out, meta
