"""Hand-built testbed export with pencil-and-paper accuracies.

The toy bed has two identity-backbone layers over width 3 and non-negative
features, so the zero-delta forward pass is the identity map and every
expected accuracy below can be checked by hand:

  task "toy" (readout columns [0, 2)): features/labels give 3/4 correct.
  task "toy2": one of two samples correct.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_DTYPE_NAMES = {"<f8": "F64", "<f4": "F32", "<i8": "I64"}

PROJECTIONS = ["q", "k", "v", "o"]
TOY_FEATURES = np.array(
    [
        [2.0, 1.0, 0.0],
        [1.0, 3.0, 0.0],
        [4.0, 1.0, 0.0],
        [0.0, 2.0, 0.0],
    ]
)
TOY_LABELS = np.array([0, 1, 1, 1], dtype=np.int64)  # sample 3 is misclassified
TOY2_FEATURES = np.array([[3.0, 1.0, 0.0], [2.0, 5.0, 0.0]])
TOY2_LABELS = np.array([0, 0], dtype=np.int64)  # second sample lands on class 1


def write_tensors(path: Path, tensors: dict[str, np.ndarray]) -> None:
    header: dict[str, dict] = {}
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        start = len(payload)
        payload += arr.tobytes()
        header[name] = {
            "dtype": _DTYPE_NAMES[arr.dtype.str],
            "shape": list(arr.shape),
            "data_offsets": [start, len(payload)],
        }
    blob = json.dumps(header).encode("utf-8")
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + bytes(payload))


def write_delta(path: Path, entries: dict[tuple[int, str], np.ndarray]) -> Path:
    write_tensors(
        path, {f"layers.{layer}.{proj}.delta": arr for (layer, proj), arr in entries.items()}
    )
    return path


def build_toy_export(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    for layer in range(2):
        for proj in PROJECTIONS:
            tensors[f"backbone.{layer}.{proj}"] = np.eye(3)
    tensors["tasks.toy.features"] = TOY_FEATURES
    tensors["tasks.toy.labels"] = TOY_LABELS
    tensors["tasks.toy2.features"] = TOY2_FEATURES
    tensors["tasks.toy2.labels"] = TOY2_LABELS
    write_tensors(root / "testbed.safetensors", tensors)

    doc = {
        "schema": 1,
        "spec": {"num_layers": 2, "num_tasks": 2, "dims": 3},
        "projection_order": PROJECTIONS,
        "activation": "relu",
        "tensors": "testbed.safetensors",
        "tasks": [
            {"name": "toy", "readout": [0, 2], "samples": 4, "expert_accuracy": 1.0},
            {"name": "toy2", "readout": [0, 2], "samples": 2, "expert_accuracy": 1.0},
        ],
        "adapters": [],
        "negative_units": [],
        "coupled_pair": None,
    }
    json_path = root / "testbed.json"
    json_path.write_text(json.dumps(doc, indent=2))
    return json_path
