"""FRCKPT1 run checkpoint container.

Layout, little-endian::

    b"FRCKPT1\\0" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

The header holds free-form ``meta`` plus an ``arrays`` table of
``{name, dtype, shape, offset}`` entries pointing into the payload.  Floating
arrays are written as 32-bit floats.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .memory import CorruptArtifactError

CKPT_MAGIC = b"FRCKPT1\x00"
CKPT_VERSION = 1
_ALLOWED = {"<f4", "<i4", "<i8", "|u1"}


def _wire_dtype(a: np.ndarray) -> np.dtype:
    if a.dtype.kind == "f":
        return np.dtype("<f4")
    if a.dtype.kind == "b" or a.dtype == np.uint8:
        return np.dtype("|u1")
    if a.dtype.kind in "iu":
        return np.dtype("<i8") if a.dtype.itemsize > 4 else np.dtype("<i4")
    raise TypeError(f"unsupported dtype {a.dtype}")


def write_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    table, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        wire = _wire_dtype(a)
        data = np.ascontiguousarray(a, dtype=wire).tobytes()
        table.append({"name": name, "dtype": wire.str, "shape": list(a.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CorruptArtifactError(f"{path}: bad magic")
    try:
        version, hlen = struct.unpack_from("<II", raw, 8)
        if version != CKPT_VERSION:
            raise CorruptArtifactError(f"{path}: unsupported version {version}")
        header = json.loads(raw[16:16 + hlen])
        base = 16 + hlen
        arrays = {}
        for entry in header["arrays"]:
            if entry["dtype"] not in _ALLOWED:
                raise CorruptArtifactError(f"{path}: bad dtype {entry['dtype']}")
            dt = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            a = np.frombuffer(raw, dt, count, base + entry["offset"]).reshape(entry["shape"])
            arrays[entry["name"]] = a.copy()
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, CorruptArtifactError):
            raise
        raise CorruptArtifactError(f"{path}: {exc}") from exc
    return header["meta"], arrays
