"""Single-file tensor container.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then raw
little-endian row-major payloads. The header maps tensor names to
{dtype, shape, offset, length, crc32} plus an optional "__config__" entry
holding arbitrary JSON metadata. Serialization is deterministic (sorted
names, canonical JSON), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import binascii
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import IntegrityError

_MAGICLEN = struct.Struct("<Q")

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_container(path, tensors: dict[str, np.ndarray], config: Optional[dict] = None) -> None:
    """Write named arrays plus optional JSON metadata to `path`."""
    for name in tensors:
        if name.startswith("__"):
            raise ValueError(f"tensor name {name!r} collides with reserved entries")
    header: dict = {}
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float32:
            dtype_name = "float32"
        elif arr.dtype == np.float64:
            dtype_name = "float64"
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = arr.astype(_DTYPES[dtype_name], copy=False).tobytes()
        header[name] = {
            "dtype": dtype_name,
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(raw),
            "crc32": binascii.crc32(raw),
        }
        payloads.append(raw)
        offset += len(raw)
    if config is not None:
        header["__config__"] = config
    blob = _canonical(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGICLEN.pack(len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_container(path) -> tuple[dict[str, np.ndarray], Optional[dict]]:
    """Read back (tensors, config). Raises IntegrityError on corruption."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_MAGICLEN.size)
        if len(head) != _MAGICLEN.size:
            raise IntegrityError(f"{path}: truncated header length")
        (hlen,) = _MAGICLEN.unpack(head)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise IntegrityError(f"{path}: truncated JSON header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"{path}: unreadable header ({exc})") from exc
        config = header.pop("__config__", None)
        base = _MAGICLEN.size + hlen
        tensors: dict[str, np.ndarray] = {}
        for name, meta in header.items():
            fh.seek(base + meta["offset"])
            raw = fh.read(meta["length"])
            if len(raw) != meta["length"]:
                raise IntegrityError(f"{path}: truncated payload for tensor {name!r}")
            if binascii.crc32(raw) != meta["crc32"]:
                raise IntegrityError(f"{path}: checksum mismatch for tensor {name!r}")
            arr = np.frombuffer(raw, dtype=_DTYPES[meta["dtype"]])
            tensors[name] = arr.reshape(meta["shape"]).astype(meta["dtype"], copy=True)
    return tensors, config
