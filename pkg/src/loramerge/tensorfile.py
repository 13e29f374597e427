"""Minimal safetensors-compatible container.

Layout: an 8-byte little-endian unsigned header length, a JSON header
mapping tensor names to {dtype, shape, data_offsets}, then the raw buffer.
Offsets are relative to the start of the buffer. The optional
"__metadata__" header entry holds a flat string-to-string map.

Only the dtypes this package stores are supported (F32, F64, I64). Writes
are deterministic: names are sorted and the header JSON is compact with
sorted keys, so identical tensors produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import TensorFileError

_DTYPE_TO_NAME = {
    np.dtype(np.float32): "F32",
    np.dtype(np.float64): "F64",
    np.dtype(np.int64): "I64",
}
_NAME_TO_DTYPE = {v: k for k, v in _DTYPE_TO_NAME.items()}

_HEADER_LEN_BYTES = 8
# guard against absurd header sizes from corrupt files
_MAX_HEADER_BYTES = 100 * 1024 * 1024


def write_tensors(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    metadata: dict[str, str] | None = None,
) -> None:
    header: dict[str, object] = {}
    if metadata is not None:
        header["__metadata__"] = dict(metadata)
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_TO_NAME:
            raise TensorFileError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        data = arr.tobytes()
        header[name] = {
            "dtype": _DTYPE_TO_NAME[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for chunk in chunks:
            fh.write(chunk)


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Returns (tensors, metadata). Raises TensorFileError on any defect."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER_LEN_BYTES:
        raise TensorFileError(f"{path}: file shorter than the 8-byte header length")
    (header_len,) = struct.unpack("<Q", blob[:_HEADER_LEN_BYTES])
    if header_len > _MAX_HEADER_BYTES or _HEADER_LEN_BYTES + header_len > len(blob):
        raise TensorFileError(f"{path}: declared header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[_HEADER_LEN_BYTES : _HEADER_LEN_BYTES + header_len])
    except json.JSONDecodeError as exc:
        raise TensorFileError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise TensorFileError(f"{path}: header must be a JSON object")

    buffer = blob[_HEADER_LEN_BYTES + header_len :]
    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict):
        raise TensorFileError(f"{path}: __metadata__ must be an object")

    tensors: dict[str, np.ndarray] = {}
    covered = 0
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise TensorFileError(f"{path}: entry for {name!r} must be an object")
        try:
            dtype_name = entry["dtype"]
            shape = entry["shape"]
            start, end = entry["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise TensorFileError(f"{path}: malformed entry for {name!r}") from exc
        if dtype_name not in _NAME_TO_DTYPE:
            raise TensorFileError(f"{path}: unsupported dtype {dtype_name!r} for {name!r}")
        dtype = _NAME_TO_DTYPE[dtype_name]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        expected = count * dtype.itemsize
        if not (0 <= start <= end <= len(buffer)) or end - start != expected:
            raise TensorFileError(
                f"{path}: offsets {[start, end]} for {name!r} do not match "
                f"shape {shape} ({expected} bytes, buffer has {len(buffer)})"
            )
        tensors[name] = np.frombuffer(buffer[start:end], dtype=dtype).reshape(shape).copy()
        covered += expected
    if covered != len(buffer):
        raise TensorFileError(
            f"{path}: buffer has {len(buffer)} bytes but entries cover {covered}"
        )
    return tensors, {str(k): str(v) for k, v in metadata.items()}
