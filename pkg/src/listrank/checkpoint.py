"""Named-tensor checkpoint files.

Layout: an 8-byte big-endian header length, a UTF-8 JSON header with
optional metadata and a manifest of (name, shape, offset) entries, then
one contiguous little-endian float64 blob. Round-trips are bit-exact and
byte-deterministic: saving the same tensors twice yields identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

_MAGIC = "listrank-ckpt-v1"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write ``{name: ndarray}`` (or autodiff Tensors) to ``path``."""
    arrays = {}
    for name in sorted(tensors):
        value = tensors[name]
        arr = np.asarray(getattr(value, "data", value), dtype=np.float64)
        # ascontiguousarray promotes 0-d arrays to 1-d; keep the true shape
        arrays[name] = np.ascontiguousarray(arr).reshape(arr.shape)
    manifest = []
    offset = 0
    for name, arr in arrays.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps(
        {"magic": _MAGIC, "meta": meta or {}, "tensors": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">Q", len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path):
    """Read a checkpoint, returning ``({name: ndarray}, meta)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ParseError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack(">Q", raw[:8])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: malformed checkpoint header: {exc}") from exc
    if header.get("magic") != _MAGIC:
        raise ParseError(f"{path}: not a checkpoint file (bad magic)")
    blob = raw[8 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return tensors, header.get("meta", {})
