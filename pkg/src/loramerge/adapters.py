"""Adapter checkpoints and the layer/task module grid.

An adapter checkpoint holds one task's LoRA factors: per layer and per
projection (q, k, v, o) a pair (A, B) with A of shape (rank, d_in) and B of
shape (d_out, rank). The dense update for a projection is
(alpha / rank) * B @ A. Files store float32; all in-memory arithmetic is
float64.

A ModuleGrid stacks T task checkpoints over L layers into the L x T unit
grid that masks index row-major: flat index j = layer * T + task.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AdapterSchemaError, GridStructureError, ShapeMismatchError, TensorFileError
from .tensorfile import read_tensors, write_tensors

PROJECTIONS = ("q", "k", "v", "o")

_MANIFEST_KEY = "manifest"


@dataclass(frozen=True)
class NamingScheme:
    """Maps tensor names in a checkpoint file onto (layer, projection, matrix).

    pattern must expose named groups ``layer`` (decimal), ``proj`` and
    ``mat`` (A or B); proj_map translates the matched projection token to a
    canonical letter.
    """

    name: str
    pattern: re.Pattern[str]
    proj_map: dict[str, str] = field(default_factory=dict)

    def parse(self, tensor_name: str) -> tuple[int, str, str] | None:
        m = self.pattern.match(tensor_name)
        if m is None:
            return None
        proj = m.group("proj")
        proj = self.proj_map.get(proj, proj)
        return int(m.group("layer")), proj, m.group("mat")


NAMING_SCHEMES: dict[str, NamingScheme] = {
    "canonical": NamingScheme(
        name="canonical",
        pattern=re.compile(r"^layers\.(?P<layer>\d+)\.(?P<proj>[qkvo])\.lora_(?P<mat>[AB])$"),
    ),
    "peft": NamingScheme(
        name="peft",
        pattern=re.compile(
            r"^(?:.*\.)?layers\.(?P<layer>\d+)\.self_attn\."
            r"(?P<proj>q_proj|k_proj|v_proj|o_proj|out_proj)\."
            r"lora_(?P<mat>[AB])(?:\.weight)?$"
        ),
        proj_map={"q_proj": "q", "k_proj": "k", "v_proj": "v", "o_proj": "o", "out_proj": "o"},
    ),
}


@dataclass
class AdapterCheckpoint:
    """One task's LoRA factors, float64, keyed layer -> projection -> (A, B)."""

    task: str
    rank: int
    alpha: float
    layers: dict[int, dict[str, tuple[np.ndarray, np.ndarray]]]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def delta_matrix(ckpt: AdapterCheckpoint, layer: int, proj: str) -> np.ndarray:
    """Dense update (alpha / rank) * B @ A for one projection, float64."""
    a, b = ckpt.layers[layer][proj]
    return ckpt.scale * (b.astype(np.float64) @ a.astype(np.float64))


def load_adapter(
    path: str | Path,
    scheme: NamingScheme | str = "canonical",
) -> AdapterCheckpoint:
    """Loads one adapter checkpoint.

    A sidecar ``<stem>.meta.json`` supplies {task_name, rank, alpha} when
    present; otherwise the task is the file stem, the rank is inferred from
    the A factors, and alpha defaults to the rank.
    """
    path = Path(path)
    if isinstance(scheme, str):
        try:
            scheme = NAMING_SCHEMES[scheme]
        except KeyError:
            raise AdapterSchemaError(
                f"unknown naming scheme {scheme!r}; known: {sorted(NAMING_SCHEMES)}"
            ) from None

    tensors, _ = read_tensors(path)
    if not tensors:
        raise AdapterSchemaError(f"{path}: checkpoint contains no tensors")

    parsed: dict[int, dict[str, dict[str, np.ndarray]]] = {}
    offenders: list[str] = []
    for name, arr in tensors.items():
        hit = scheme.parse(name)
        if hit is None:
            offenders.append(name)
            continue
        layer, proj, mat = hit
        if proj not in PROJECTIONS:
            offenders.append(name)
            continue
        parsed.setdefault(layer, {}).setdefault(proj, {})[mat] = arr.astype(np.float64)
    if offenders:
        raise AdapterSchemaError(
            f"{path}: tensor names not recognized by scheme {scheme.name!r}: "
            + ", ".join(sorted(offenders))
        )

    layers: dict[int, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
    ranks: set[int] = set()
    for layer, projs in parsed.items():
        missing = [p for p in PROJECTIONS if p not in projs]
        if missing:
            raise AdapterSchemaError(
                f"{path}: layer {layer} is missing projections {missing}; "
                f"a unit needs all of {list(PROJECTIONS)}"
            )
        layers[layer] = {}
        for proj, mats in projs.items():
            if set(mats) != {"A", "B"}:
                raise AdapterSchemaError(
                    f"{path}: layer {layer} projection {proj} needs both lora_A and lora_B"
                )
            a, b = mats["A"], mats["B"]
            if a.ndim != 2 or b.ndim != 2:
                raise AdapterSchemaError(
                    f"{path}: layer {layer} projection {proj}: factors must be 2-D"
                )
            if a.shape[0] != b.shape[1]:
                raise AdapterSchemaError(
                    f"{path}: layer {layer} projection {proj}: rank mismatch, "
                    f"A is {a.shape} but B is {b.shape}"
                )
            ranks.add(a.shape[0])
            layers[layer][proj] = (a, b)
    if len(ranks) != 1:
        raise AdapterSchemaError(f"{path}: inconsistent ranks across projections: {sorted(ranks)}")
    rank = ranks.pop()

    task = path.name
    for suffix in (".safetensors", ".st"):
        if task.endswith(suffix):
            task = task[: -len(suffix)]
            break
    alpha = float(rank)
    meta_path = path.with_suffix(".meta.json")
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise AdapterSchemaError(f"{meta_path}: invalid JSON: {exc}") from exc
        task = str(meta.get("task_name", task))
        alpha = float(meta.get("alpha", alpha))
        if "rank" in meta and int(meta["rank"]) != rank:
            raise AdapterSchemaError(
                f"{meta_path}: declares rank {meta['rank']} but tensors have rank {rank}"
            )
    return AdapterCheckpoint(task=task, rank=rank, alpha=alpha, layers=layers)


@dataclass
class ModuleGrid:
    """T task checkpoints arranged over L layers; unit (l, t) is indivisible."""

    checkpoints: list[AdapterCheckpoint]
    tasks: list[str]
    num_layers: int
    projections: tuple[str, ...]
    shapes: dict[str, tuple[int, int]]

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_units(self) -> int:
        return self.num_layers * len(self.tasks)

    def unit_delta(self, layer: int, task_index: int, proj: str) -> np.ndarray:
        return delta_matrix(self.checkpoints[task_index], layer, proj)

    def unit_factors(self, layer: int, task_index: int, proj: str) -> tuple[np.ndarray, np.ndarray]:
        """Returns (B * alpha/rank, A) so that the product is the dense update."""
        ckpt = self.checkpoints[task_index]
        a, b = ckpt.layers[layer][proj]
        return ckpt.scale * b, a


def build_grid(checkpoints: list[AdapterCheckpoint]) -> ModuleGrid:
    """Validates and assembles the L x T grid. Task order follows the input."""
    if not checkpoints:
        raise GridStructureError("no adapter checkpoints given")
    tasks = [c.task for c in checkpoints]
    if len(set(tasks)) != len(tasks):
        raise GridStructureError(f"task names must be unique, got {tasks}")

    ref = checkpoints[0]
    layer_ids = sorted(ref.layers)
    if layer_ids != list(range(len(layer_ids))):
        raise GridStructureError(
            f"layer indices must be contiguous from 0, got {layer_ids}"
        )
    for c in checkpoints[1:]:
        if sorted(c.layers) != layer_ids:
            raise GridStructureError(
                f"task {c.task!r} has layers {sorted(c.layers)} but "
                f"task {ref.task!r} has {layer_ids}"
            )

    shapes: dict[str, tuple[int, int]] = {}
    for layer in layer_ids:
        for proj in PROJECTIONS:
            per_task = []
            for c in checkpoints:
                a, b = c.layers[layer][proj]
                per_task.append((b.shape[0], a.shape[1]))
            if len(set(per_task)) != 1:
                raise ShapeMismatchError(
                    f"layer {layer} projection {proj}: update shapes differ across "
                    f"tasks: {dict(zip(tasks, per_task))}"
                )
            shapes.setdefault(proj, per_task[0])
    return ModuleGrid(
        checkpoints=list(checkpoints),
        tasks=tasks,
        num_layers=len(layer_ids),
        projections=PROJECTIONS,
        shapes=shapes,
    )


def save_delta(
    path: str | Path,
    entries: dict[tuple[int, str], np.ndarray],
    manifest: dict[str, object],
) -> None:
    """Writes a merged delta: tensors ``layers.{l}.{proj}.delta`` plus an
    embedded JSON manifest (method, lambda, mask, seed)."""
    tensors = {f"layers.{layer}.{proj}.delta": arr for (layer, proj), arr in entries.items()}
    write_tensors(path, tensors, metadata={_MANIFEST_KEY: json.dumps(manifest, sort_keys=True)})


_DELTA_NAME = re.compile(r"^layers\.(?P<layer>\d+)\.(?P<proj>[qkvo])\.delta$")


def load_delta(path: str | Path) -> tuple[dict[tuple[int, str], np.ndarray], dict[str, object]]:
    tensors, metadata = read_tensors(path)
    entries: dict[tuple[int, str], np.ndarray] = {}
    for name, arr in tensors.items():
        m = _DELTA_NAME.match(name)
        if m is None:
            raise TensorFileError(f"{path}: unexpected tensor {name!r} in a merged delta file")
        entries[(int(m.group("layer")), m.group("proj"))] = arr
    manifest: dict[str, object] = {}
    if _MANIFEST_KEY in metadata:
        manifest = json.loads(metadata[_MANIFEST_KEY])
    return entries, manifest
