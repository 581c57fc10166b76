"""Self-describing binary container for named arrays.

Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON header,
then the raw array payload. The header carries a format version, a kind tag,
caller metadata and a sorted tensor index (name, dtype, shape, offset).
Writing is fully deterministic, so identical content produces identical
bytes on every platform.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"SMX1"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8"), "|u1": np.dtype("|u1")}


def _dtype_tag(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "<f8"
    if kind in "iu":
        return "<i8"
    if kind == "b":
        return "|u1"
    raise ValidationError(f"unsupported array dtype {arr.dtype}")


def save_container(
    path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]
) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        tag = _dtype_tag(arr)
        arr = arr.astype(_DTYPES[tag], copy=False)
        entries.append(
            {
                "name": name,
                "dtype": tag,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes(order="C"))
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValidationError(f"{path}: not a container file (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValidationError(
                f"{path}: unsupported format version {header.get('format_version')}"
            )
        payload = fh.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        start = entry["offset"]
        raw = payload[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
        if entry["dtype"] == "|u1":
            arr = arr.astype(bool)
        arrays[entry["name"]] = arr
    return header, arrays
