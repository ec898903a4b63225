"""Flat tensor archive: JSON header plus raw little-endian payloads.

Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header,
then each tensor's bytes row-major at its stated offset. The header lists
(name, shape, dtype, offset, nbytes) per tensor and carries a caller
metadata dict (model config, vocab hash, step counter, model family).
Serialization is canonical, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataFormatError

_MAGIC = b"TTCKPT01"

_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8"}


def save_checkpoint(
    path: str | Path, tensors: dict[str, np.ndarray], meta: dict
) -> None:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        original = np.asarray(tensors[name])
        # ascontiguousarray promotes 0-d to 1-d; restore the true shape
        arr = np.ascontiguousarray(original).reshape(original.shape)
        dtype = arr.dtype.newbyteorder("<")
        if dtype.str not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        data = arr.astype(dtype, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype.str,
                "offset": offset,
                "nbytes": len(data),
            }
        )
        payloads.append(data)
        offset += len(data)
    header = json.dumps(
        {"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for data in payloads:
            f.write(data)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint archive (bad magic)")
    try:
        (header_len,) = struct.unpack_from("<Q", blob, len(_MAGIC))
        header_start = len(_MAGIC) + 8
        header = json.loads(blob[header_start : header_start + header_len])
        payload_start = header_start + header_len
        tensors: dict[str, np.ndarray] = {}
        for e in header["tensors"]:
            if e["dtype"] not in _ALLOWED_DTYPES:
                raise DataFormatError(f"{path}: bad dtype {e['dtype']!r}")
            start = payload_start + e["offset"]
            arr = np.frombuffer(blob[start : start + e["nbytes"]], dtype=e["dtype"])
            expected = int(np.prod(e["shape"])) if e["shape"] else 1
            if arr.size != expected:
                raise DataFormatError(
                    f"{path}: tensor {e['name']!r} truncated "
                    f"({arr.size} elements, expected {expected})"
                )
            tensors[e["name"]] = arr.reshape(e["shape"]).copy()
        return tensors, header["meta"]
    except (KeyError, ValueError, TypeError, struct.error) as err:
        if isinstance(err, DataFormatError):
            raise
        raise DataFormatError(f"{path}: malformed checkpoint ({err})") from err
