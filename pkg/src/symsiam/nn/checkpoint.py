"""Binary checkpoint container.

Layout: ``b"PSYM"``, format version (u32 LE), JSON metadata length (u32 LE),
UTF-8 JSON metadata, then each array as little-endian float32 in the order
listed under ``metadata["arrays"]``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"PSYM"
FORMAT_VERSION = 1


def encode_checkpoint(metadata: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    meta = dict(metadata)
    meta["arrays"] = [{"name": name, "shape": list(a.shape)} for name, a in arrays]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    parts.extend(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:4] != MAGIC:
        raise DataError("not a checkpoint file (bad magic bytes)")
    version, meta_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    meta = json.loads(raw[12 : 12 + meta_len].decode("utf-8"))
    offset = 12 + meta_len
    arrays: dict[str, np.ndarray] = {}
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise DataError("truncated checkpoint")
        arrays[entry["name"]] = (
            np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        )
        offset += nbytes
    if offset != len(raw):
        raise DataError("trailing bytes after checkpoint arrays")
    return meta, arrays


def save_checkpoint(path, metadata: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(metadata, arrays))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
