"""Exported-testbed evaluation: forward pass and per-task accuracy.

The export describes a stack of layers; each layer multiplies the hidden
state by the composition of its projection matrices (in the file's declared
projection order, first projection applied first) and a ReLU sits strictly
between layers.  A merged delta adds one dense matrix per (layer,
projection).  Task accuracy is argmax classification over the task's readout
slice of the final hidden state.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import reduce
from pathlib import Path

import numpy as np

from .tensorfile import TensorFormatError, read_tensors


class TestbedError(Exception):
    __test__ = False  # keep pytest from collecting the Test- prefix


@dataclass
class TaskEval:
    name: str
    readout: tuple[int, int]  # [lo, hi) slice of the final hidden state
    features: np.ndarray
    labels: np.ndarray


@dataclass
class Testbed:
    num_layers: int
    projection_order: list[str]
    backbone: dict[tuple[int, str], np.ndarray]
    tasks: dict[str, TaskEval]
    dim: int


def load_testbed(json_path: str | Path) -> Testbed:
    json_path = Path(json_path)
    try:
        doc = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TestbedError(f"cannot read testbed {json_path}: {exc}") from exc

    try:
        num_layers = int(doc["spec"]["num_layers"])
        order = [str(p) for p in doc["projection_order"]]
        activation = doc["activation"]
        tensors_name = doc["tensors"]
        task_docs = doc["tasks"]
    except (KeyError, TypeError) as exc:
        raise TestbedError(f"{json_path}: missing field {exc}") from exc
    if activation != "relu":
        raise TestbedError(f"{json_path}: unsupported activation {activation!r}")

    tensors, _ = read_tensors(json_path.parent / tensors_name)

    backbone: dict[tuple[int, str], np.ndarray] = {}
    dim = None
    for layer in range(num_layers):
        for proj in order:
            key = f"backbone.{layer}.{proj}"
            if key not in tensors:
                raise TestbedError(f"{json_path}: export lacks tensor {key}")
            mat = np.asarray(tensors[key], dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise TestbedError(f"{json_path}: {key} must be square, got {mat.shape}")
            if dim is None:
                dim = mat.shape[0]
            elif mat.shape[0] != dim:
                raise TestbedError(f"{json_path}: {key} disagrees on width {dim}")
            backbone[(layer, proj)] = mat

    tasks: dict[str, TaskEval] = {}
    for entry in task_docs:
        name = str(entry["name"])
        lo, hi = (int(v) for v in entry["readout"])
        features = tensors.get(f"tasks.{name}.features")
        labels = tensors.get(f"tasks.{name}.labels")
        if features is None or labels is None:
            raise TestbedError(f"{json_path}: export lacks data for task {name!r}")
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[1] != dim:
            raise TestbedError(f"{json_path}: features for {name!r} must be (n, {dim})")
        if labels.shape != (features.shape[0],):
            raise TestbedError(f"{json_path}: labels for {name!r} must pair its features")
        if not 0 <= lo < hi <= dim:
            raise TestbedError(f"{json_path}: readout [{lo}, {hi}) outside width {dim}")
        tasks[name] = TaskEval(name=name, readout=(lo, hi), features=features, labels=labels)
    if not tasks:
        raise TestbedError(f"{json_path}: export declares no tasks")
    return Testbed(
        num_layers=num_layers, projection_order=order, backbone=backbone, tasks=tasks, dim=dim
    )


_DELTA_NAME = re.compile(r"^layers\.(\d+)\.([a-z])\.delta$")


def load_delta(path: str | Path, bed: Testbed) -> dict[tuple[int, str], np.ndarray]:
    """Merged delta file: tensors named layers.{layer}.{projection}.delta."""
    tensors, _ = read_tensors(path)
    delta: dict[tuple[int, str], np.ndarray] = {}
    for name, arr in tensors.items():
        match = _DELTA_NAME.match(name)
        if match is None:
            raise TestbedError(f"{path}: unexpected tensor {name!r} in a merged delta")
        layer, proj = int(match.group(1)), match.group(2)
        if layer >= bed.num_layers or proj not in bed.projection_order:
            raise TestbedError(f"{path}: tensor {name!r} addresses no testbed slot")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (bed.dim, bed.dim):
            raise TestbedError(
                f"{path}: tensor {name!r} has shape {arr.shape}, testbed needs "
                f"({bed.dim}, {bed.dim})"
            )
        delta[(layer, proj)] = arr
    return delta


def _layer_matrix(
    bed: Testbed, delta: dict[tuple[int, str], np.ndarray], layer: int
) -> np.ndarray:
    mats = []
    for proj in bed.projection_order:
        w = bed.backbone[(layer, proj)]
        patch = delta.get((layer, proj))
        mats.append(w if patch is None else w + patch)
    return reduce(lambda acc, w: w @ acc, mats)


def per_task_accuracy(
    bed: Testbed,
    delta: dict[tuple[int, str], np.ndarray],
    tasks: list[str],
    subsample: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Accuracy per requested task; unknown task names raise KeyError.

    ``subsample`` draws that many examples per task without replacement from
    ``rng``; the full set reproduces the exact accuracy.
    """
    layer_mats = [_layer_matrix(bed, delta, layer) for layer in range(bed.num_layers)]
    out: dict[str, float] = {}
    for name in tasks:
        task = bed.tasks[name]
        features, labels = task.features, task.labels
        if subsample is not None:
            if not 1 <= subsample <= features.shape[0]:
                raise TestbedError(
                    f"subsample must be in [1, {features.shape[0]}], got {subsample}"
                )
            picked = rng.choice(features.shape[0], size=subsample, replace=False)
            features, labels = features[picked], labels[picked]
        hidden = features
        for layer, mat in enumerate(layer_mats):
            hidden = hidden @ mat.T
            if layer < bed.num_layers - 1:
                hidden = np.maximum(hidden, 0.0)
        lo, hi = task.readout
        predictions = np.argmax(hidden[:, lo:hi], axis=1)
        out[name] = float(np.mean(predictions == labels))
    return out
