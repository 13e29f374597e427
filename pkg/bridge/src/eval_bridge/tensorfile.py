"""Minimal safetensors reader.

The format is an 8-byte little-endian header length, a JSON header mapping
tensor names to {dtype, shape, data_offsets}, then the raw tensor bytes.
Offsets are relative to the start of the data section.  Only the dtypes the
testbed export uses are supported.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
    "I64": np.dtype("<i8"),
}


class TensorFormatError(Exception):
    pass


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise TensorFormatError(f"{path}: too short to hold a header length")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise TensorFormatError(f"{path}: header length {header_len} overruns the file")
    try:
        header = json.loads(blob[8 : 8 + header_len])
    except json.JSONDecodeError as exc:
        raise TensorFormatError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise TensorFormatError(f"{path}: header must be a JSON object")

    data = blob[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    metadata: dict[str, str] = {}
    for name, info in header.items():
        if name == "__metadata__":
            metadata = {str(k): str(v) for k, v in info.items()}
            continue
        try:
            dtype = _DTYPES[info["dtype"]]
            shape = tuple(int(n) for n in info["shape"])
            start, end = info["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise TensorFormatError(f"{path}: bad entry for tensor {name!r}: {exc}") from exc
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if end - start != count * dtype.itemsize or not 0 <= start <= end <= len(data):
            raise TensorFormatError(
                f"{path}: tensor {name!r} offsets [{start}, {end}) do not match "
                f"shape {shape} of {info['dtype']}"
            )
        tensors[name] = np.frombuffer(data[start:end], dtype=dtype).reshape(shape).copy()
    return tensors, metadata
