"""Binary pruning masks and the latent-to-mask mapping.

A mask is an L x T grid of bits, one per (layer, task) unit; bit 1 means
the unit is removed before merging. Flat order is row-major:
j = layer * T + task.

map_latent turns a continuous search point into a mask under a prune
budget: with N = len(latent) and budget fraction max_prune, the
floor(max_prune * N) largest entries are candidates (ties broken toward
the lower index) and a candidate is pruned only when its entry is strictly
positive. The sign gate means the searcher can use less than the budget;
an exact zero is never pruned. The budget is evaluated in floating point,
so pick budgets strictly between j/N and (j+1)/N when an exact count j is
intended.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import MaskFormatError, ShapeMismatchError


def map_latent(latent: np.ndarray, max_prune: float) -> np.ndarray:
    """Maps a latent vector to a flat 0/1 mask. Deterministic and pure."""
    if not 0.0 <= max_prune <= 1.0:
        raise ValueError(f"max_prune must be in [0, 1], got {max_prune}")
    z = np.asarray(latent, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"latent must be 1-D, got shape {z.shape}")
    n = z.shape[0]
    n_prune = math.floor(max_prune * n)
    mask = np.zeros(n, dtype=np.uint8)
    if n_prune == 0:
        return mask
    # stable argsort on -z keeps the lower index first among equal values
    order = np.argsort(-z, kind="stable")
    candidates = order[:n_prune]
    mask[candidates[z[candidates] > 0.0]] = 1
    return mask


@dataclass
class PruningMask:
    """L x T bit grid plus the task names that give columns their meaning."""

    bits: np.ndarray
    tasks: list[str]

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 2:
            raise ShapeMismatchError(f"mask bits must be 2-D, got shape {self.bits.shape}")
        if self.bits.shape[1] != len(self.tasks):
            raise ShapeMismatchError(
                f"mask has {self.bits.shape[1]} columns but {len(self.tasks)} task names"
            )
        if not np.isin(self.bits, (0, 1)).all():
            raise MaskFormatError("mask entries must be 0 or 1")

    @property
    def num_layers(self) -> int:
        return int(self.bits.shape[0])

    @property
    def num_tasks(self) -> int:
        return int(self.bits.shape[1])

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def flat(self) -> np.ndarray:
        return self.bits.reshape(-1).copy()

    @classmethod
    def from_flat(cls, flat: np.ndarray, *, num_layers: int, tasks: list[str]) -> "PruningMask":
        flat = np.asarray(flat, dtype=np.uint8)
        expected = num_layers * len(tasks)
        if flat.shape != (expected,):
            raise ShapeMismatchError(
                f"flat mask has shape {flat.shape}, expected ({expected},) "
                f"for {num_layers} layers x {len(tasks)} tasks"
            )
        return cls(bits=flat.reshape(num_layers, len(tasks)), tasks=list(tasks))

    @classmethod
    def zeros(cls, *, num_layers: int, tasks: list[str]) -> "PruningMask":
        return cls(bits=np.zeros((num_layers, len(tasks)), dtype=np.uint8), tasks=list(tasks))


def mask_to_json(mask: PruningMask) -> str:
    payload = {
        "L": mask.num_layers,
        "T": mask.num_tasks,
        "tasks": mask.tasks,
        "rows": ["".join(str(int(b)) for b in row) for row in mask.bits],
    }
    return json.dumps(payload, separators=(", ", ": "))


def mask_from_json(blob: str) -> PruningMask:
    try:
        payload = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise MaskFormatError(f"mask is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise MaskFormatError("mask JSON must be an object")
    missing = [key for key in ("L", "T", "tasks", "rows") if key not in payload]
    if missing:
        raise MaskFormatError(f"mask JSON is missing keys {missing}")
    num_layers, num_tasks = payload["L"], payload["T"]
    tasks, rows = payload["tasks"], payload["rows"]
    if not isinstance(tasks, list) or len(tasks) != num_tasks:
        raise MaskFormatError(f"tasks must list exactly T={num_tasks} names")
    if not isinstance(rows, list) or len(rows) != num_layers:
        raise MaskFormatError(f"rows must hold exactly L={num_layers} bit-strings")
    bits = np.zeros((num_layers, num_tasks), dtype=np.uint8)
    for i, row in enumerate(rows):
        if not isinstance(row, str) or len(row) != num_tasks or set(row) - {"0", "1"}:
            raise MaskFormatError(
                f"row {i} must be a string of {num_tasks} characters from 0/1, got {row!r}"
            )
        bits[i] = [int(c) for c in row]
    return PruningMask(bits=bits, tasks=[str(t) for t in tasks])
