"""Synthetic multi-task benchmark with known-bad adapter units.

Builds a small stack of linear attention-shaped layers (q, k, v, o projections
per layer, ReLU between layers) plus one low-rank adapter per task.  Each
adapter amplifies its own task's feature block in the early layers and writes
class scores into a per-task readout slice at the last layer.  Selected units
additionally carry an adversarial payload that damps another task's feature
block, so the ground-truth set of harmful units is known by construction and
search results can be scored against it.

Geometry of the feature space (``dims`` columns):

* ``[t*C, (t+1)*C)``            readout slice of task ``t`` (C classes)
* ``[T*C + t*C, T*C + (t+1)*C)`` feature block of task ``t``
* ``2*T*C``                      constant bias input (1.0)
* ``2*T*C + 1``                  latch used by the coupled-pair construction
* remaining columns              unused padding
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import PROJECTIONS, AdapterCheckpoint, ModuleGrid, build_grid, load_adapter
from .errors import ConfigError
from .tensorfile import read_tensors, write_tensors

_HOT = 1.0  # active feature value for the labeled class
_COLD = 0.25  # resting value of every other feature
_FEATURE_NOISE = 0.02
_READOUT_BASE = 0.3  # resting readout level; the noise on it sets task difficulty
_READOUT_NOISE = 0.12
_JITTER = 0.002  # backbone is identity plus this much noise
_AMP = 0.15  # per-projection gain an adapter adds to its own feature block
_PAYLOAD = 3.0  # adversarial damping, as a multiple of _AMP
_CLS_MARGIN = 0.6  # classifier weight is normalized so hot-vs-cold margin is this
_LATCH_LEVEL = 1.0
_LATCH_SUPPRESS = 1.2  # each suppressor cancels the latch with 20% headroom
_LATCH_WEIGHT = 2.0  # readout swing applied when the latch fires
_EXPERT_FLOOR = 0.95
_CHANCE_BAND = 0.1


@dataclass(frozen=True)
class TestbedSpec:
    """Parameters controlling testbed construction."""

    __test__ = False  # keep pytest from collecting this as a test class

    num_layers: int = 3
    num_tasks: int = 3
    dims: int = 16
    num_negatives: int = 0
    seed: int = 0
    coupled_pair: bool = False
    samples_per_task: int = 256
    classes: int = 2
    rank: int = 6

    def __post_init__(self) -> None:
        if self.num_layers < 2:
            raise ConfigError("testbed needs at least 2 layers (amplifier + classifier)")
        if self.num_tasks < 1:
            raise ConfigError("testbed needs at least 1 task")
        if self.classes < 2:
            raise ConfigError("testbed needs at least 2 classes")
        if self.samples_per_task < 2 * self.classes:
            raise ConfigError("samples_per_task too small to cover every class")
        needed = 2 * self.num_tasks * self.classes + 2
        if self.dims < needed:
            raise ConfigError(
                f"dims={self.dims} too small: {self.num_tasks} tasks x {self.classes} classes "
                f"need at least {needed} columns"
            )
        amp_cells = (self.num_layers - 1) * self.num_tasks
        reserved = 2 if self.coupled_pair else 0
        if self.num_negatives > amp_cells - reserved:
            raise ConfigError(
                f"cannot place {self.num_negatives} negative units: only "
                f"{amp_cells - reserved} amplifier cells available"
            )
        if self.coupled_pair and self.num_tasks < 2:
            raise ConfigError("coupled_pair needs at least 2 tasks")
        if self.rank < 2 * self.classes + 2:
            raise ConfigError("rank too small to represent the planted updates exactly")


@dataclass
class TaskData:
    name: str
    features: np.ndarray  # (samples, dims) float64
    labels: np.ndarray  # (samples,) int64
    readout: tuple[int, int]  # half-open column range holding the class scores


@dataclass
class SyntheticTestbed:
    spec: TestbedSpec
    backbone: dict[tuple[int, str], np.ndarray]
    tasks: list[TaskData]
    adapters: list[AdapterCheckpoint]
    negative_units: list[tuple[int, int]]
    coupled_pair: tuple[tuple[int, int], tuple[int, int]] | None
    expert_scores: dict[str, float]
    _planted: dict[tuple[int, int, str], np.ndarray] = field(default_factory=dict, repr=False)

    def grid(self) -> ModuleGrid:
        return build_grid(self.adapters)

    def planted_delta(self, layer: int, task: int, proj: str) -> np.ndarray:
        """Exact planted update before low-rank factorization."""
        return self._planted[(layer, task, proj)].copy()


def _forward(
    backbone: dict[tuple[int, str], np.ndarray],
    entries: dict[tuple[int, str], np.ndarray] | None,
    num_layers: int,
    features: np.ndarray,
) -> np.ndarray:
    h = features
    for layer in range(num_layers):
        mat = None
        for proj in PROJECTIONS:
            w = backbone[(layer, proj)]
            if entries is not None and (layer, proj) in entries:
                w = w + entries[(layer, proj)]
            mat = w if mat is None else w @ mat
        h = h @ mat.T
        if layer < num_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def evaluate(
    bed: SyntheticTestbed,
    entries: dict[tuple[int, str], np.ndarray] | None,
    *,
    subsample: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Per-task accuracy of the backbone plus an optional merged update.

    ``entries`` maps (layer, projection) to an additive delta; ``None``
    evaluates the bare backbone.  ``subsample`` draws that many examples per
    task without replacement from ``rng``; drawing the full set reproduces the
    exact accuracy.
    """
    blocks: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for task in bed.tasks:
        feats, labs = task.features, task.labels
        if subsample is not None:
            if rng is None:
                raise ValueError("subsample requires an rng")
            if not 1 <= subsample <= feats.shape[0]:
                raise ValueError(
                    f"subsample must be in [1, {feats.shape[0]}], got {subsample}"
                )
            idx = rng.choice(feats.shape[0], size=subsample, replace=False)
            feats, labs = feats[idx], labs[idx]
        blocks.append(feats)
        labels.append(labs)
    out = _forward(bed.backbone, entries, bed.spec.num_layers, np.concatenate(blocks, axis=0))
    accs: dict[str, float] = {}
    start = 0
    for task, labs in zip(bed.tasks, labels):
        stop = start + labs.shape[0]
        lo, hi = task.readout
        pred = np.argmax(out[start:stop, lo:hi], axis=1)
        accs[task.name] = float(np.mean(pred == labs))
        start = stop
    return accs


def _factorize(delta: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray]:
    u, s, vh = np.linalg.svd(delta, full_matrices=False)
    b = u[:, :rank] * s[:rank]
    a = vh[:rank, :]
    return b, a


def _place_negatives(spec: TestbedSpec, reserved: set[tuple[int, int]], rng: np.random.Generator):
    """Pick negative cells and victims, at most one payload per (layer, victim)."""
    cells = [
        (layer, task)
        for layer in range(spec.num_layers - 1)
        for task in range(spec.num_tasks)
        if (layer, task) not in reserved
    ]
    order = rng.permutation(len(cells))
    taken: set[tuple[int, int]] = set()  # (layer, victim) pairs already used
    placed: list[tuple[int, int, int]] = []  # (layer, task, victim)
    for i in order:
        if len(placed) == spec.num_negatives:
            break
        layer, task = cells[i]
        for shift in range(1, spec.num_tasks):
            victim = (task + shift) % spec.num_tasks
            if (layer, victim) not in taken:
                taken.add((layer, victim))
                placed.append((layer, task, victim))
                break
    if len(placed) < spec.num_negatives:
        raise ConfigError("could not place the requested number of negative units")
    return sorted((layer, task) for layer, task, _ in placed), {
        (layer, task): victim for layer, task, victim in placed
    }


def make_testbed(spec: TestbedSpec) -> SyntheticTestbed:
    """Construct a testbed and verify its contract before returning it.

    Guarantees on the returned bed: every expert adapter scores at least 0.95
    on its own task, the bare backbone sits within 0.1 of chance, and pruning
    exactly the planted negative set strictly improves the mean normalized
    accuracy of the plain-sum merge over pruning nothing.
    """
    rng = np.random.default_rng(spec.seed)
    d, L, T, C = spec.dims, spec.num_layers, spec.num_tasks, spec.classes
    bias_col = 2 * T * C
    latch_col = bias_col + 1

    def info(task: int) -> slice:
        return slice(T * C + task * C, T * C + (task + 1) * C)

    def readout(task: int) -> tuple[int, int]:
        return task * C, (task + 1) * C

    # Total amplifier gain grows exponentially with depth, and so does the
    # leakage of amplified features through off-diagonal noise; shrink the
    # jitter on deep stacks so that leakage stays well below the classifier
    # signal.  Shallow beds (up to 3 layers) keep the full jitter.
    gain = (1.0 + _AMP) ** (4 * (L - 1))
    jitter = _JITTER * min(1.0, (1.0 + _AMP) ** 8 / gain)
    backbone = {
        (layer, proj): np.eye(d) + jitter * rng.standard_normal((d, d))
        for layer in range(L)
        for proj in PROJECTIONS
    }

    pair = ((L - 2, 0), (L - 2, 1)) if spec.coupled_pair else None
    if pair is not None:
        # The latch charges to _LATCH_LEVEL from the bias input unless a
        # suppressor carried by either paired unit cancels it; when it fires,
        # the last layer swings both paired tasks' readouts to chance.
        wq = backbone[(L - 2, "q")]
        wq[latch_col, :] = 0.0
        wq[latch_col, bias_col] = _LATCH_LEVEL
        for layer in range(L):
            for proj in PROJECTIONS:
                if (layer, proj) != (L - 2, "q"):
                    backbone[(layer, proj)][latch_col, :] = 0.0
                    backbone[(layer, proj)][latch_col, latch_col] = 1.0
        wo = backbone[(L - 1, "o")]
        for task in (0, 1):
            lo, _ = readout(task)
            wo[lo, latch_col] = -_LATCH_WEIGHT
            wo[lo + 1, latch_col] = _LATCH_WEIGHT

    reserved = set(pair) if pair is not None else set()
    negatives, victims = _place_negatives(spec, reserved, rng)

    # Planted per-unit updates.  Amplifier layers scale the unit's own feature
    # block in all four projections; the last layer's o projection maps feature
    # blocks onto readout slices.  The classifier weight is normalized by the
    # total amplifier gain so margins stay comparable across depths.
    cls_weight = _CLS_MARGIN / ((_HOT - _COLD) * gain)
    planted: dict[tuple[int, int, str], np.ndarray] = {}
    for task in range(T):
        for layer in range(L):
            for proj in PROJECTIONS:
                delta = np.zeros((d, d))
                if layer < L - 1:
                    delta[info(task), info(task)] += _AMP * np.eye(C)
                elif proj == "o":
                    lo, _ = readout(task)
                    rows = np.arange(lo, lo + C)
                    cols = np.arange(T * C + task * C, T * C + task * C + C)
                    delta[rows, cols] = cls_weight
                planted[(layer, task, proj)] = delta
    for (layer, task), victim in victims.items():
        for proj in PROJECTIONS:
            planted[(layer, task, proj)][info(victim), info(victim)] -= (
                _PAYLOAD * _AMP * np.eye(C)
            )
    if pair is not None:
        (la, ta), (lb, tb) = pair
        for (layer, unit), victim in (((la, ta), tb), ((lb, tb), ta)):
            for proj in PROJECTIONS:
                planted[(layer, unit, proj)][info(victim), info(victim)] -= (
                    _PAYLOAD * _AMP * np.eye(C)
                )
            planted[(layer, unit, "q")][latch_col, bias_col] = -_LATCH_SUPPRESS * _LATCH_LEVEL

    adapters = []
    for task in range(T):
        layers = {}
        for layer in range(L):
            per_proj = {}
            for proj in PROJECTIONS:
                b, a = _factorize(planted[(layer, task, proj)], spec.rank)
                per_proj[proj] = (a, b)
            layers[layer] = per_proj
        adapters.append(
            AdapterCheckpoint(
                task=f"task_{task}", rank=spec.rank, alpha=float(spec.rank), layers=layers
            )
        )

    tasks = []
    n = spec.samples_per_task
    for task in range(T):
        labels = np.arange(n, dtype=np.int64) % C
        feats = np.zeros((n, d))
        feats[:, T * C : 2 * T * C] = _COLD + _FEATURE_NOISE * rng.standard_normal((n, T * C))
        hot = T * C + task * C + labels
        feats[np.arange(n), hot] = _HOT + _FEATURE_NOISE * rng.standard_normal(n)
        feats[:, : T * C] = _READOUT_BASE + _READOUT_NOISE * rng.standard_normal((n, T * C))
        feats[:, bias_col] = 1.0
        tasks.append(TaskData(name=f"task_{task}", features=feats, labels=labels, readout=readout(task)))

    bed = SyntheticTestbed(
        spec=spec,
        backbone=backbone,
        tasks=tasks,
        adapters=adapters,
        negative_units=negatives,
        coupled_pair=pair,
        expert_scores={},
        _planted=planted,
    )
    for task in range(T):
        entries = {
            (layer, proj): planted[(layer, task, proj)]
            for layer in range(L)
            for proj in PROJECTIONS
        }
        name = f"task_{task}"
        bed.expert_scores[name] = evaluate(bed, entries)[name]
    _check_contract(bed)
    return bed


def _check_contract(bed: SyntheticTestbed) -> None:
    for name, score in bed.expert_scores.items():
        if score < _EXPERT_FLOOR:
            raise ConfigError(f"testbed expert for {name} scored {score:.3f} < {_EXPERT_FLOOR}")
    chance = 1.0 / bed.spec.classes
    for name, acc in evaluate(bed, None).items():
        if abs(acc - chance) > _CHANCE_BAND:
            raise ConfigError(f"backbone accuracy for {name} is {acc:.3f}, not near chance")
    harmful = list(bed.negative_units)
    if bed.coupled_pair is not None:
        harmful.append(bed.coupled_pair[0])
    if harmful:
        grid = bed.grid()

        def fitness(pruned: set[tuple[int, int]]) -> float:
            entries: dict[tuple[int, str], np.ndarray] = {}
            for layer in range(bed.spec.num_layers):
                for proj in PROJECTIONS:
                    total = np.zeros((bed.spec.dims, bed.spec.dims))
                    for task in range(bed.spec.num_tasks):
                        if (layer, task) not in pruned:
                            total += grid.unit_delta(layer, task, proj)
                    entries[(layer, proj)] = total
            accs = evaluate(bed, entries)
            return float(
                np.mean([accs[t.name] / bed.expert_scores[t.name] for t in bed.tasks])
            )

        if not fitness(set(harmful)) > fitness(set()):
            raise ConfigError("pruning the planted negative set does not improve fitness")


def export_testbed(bed: SyntheticTestbed, out_dir: Path | str) -> Path:
    """Write the bed to ``out_dir``: testbed.json + testbed.safetensors +
    one adapter checkpoint per task under adapters/.  Returns the json path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    for (layer, proj), w in bed.backbone.items():
        tensors[f"backbone.{layer}.{proj}"] = w
    for task in bed.tasks:
        tensors[f"tasks.{task.name}.features"] = task.features
        tensors[f"tasks.{task.name}.labels"] = task.labels
    write_tensors(out / "testbed.safetensors", tensors)

    adapter_dir = out / "adapters"
    adapter_dir.mkdir(exist_ok=True)
    adapter_entries = []
    for ckpt in bed.adapters:
        tens = {}
        for layer, per_proj in ckpt.layers.items():
            for proj, (a, b) in per_proj.items():
                tens[f"layers.{layer}.{proj}.lora_A"] = a.astype(np.float32)
                tens[f"layers.{layer}.{proj}.lora_B"] = b.astype(np.float32)
        path = adapter_dir / f"{ckpt.task}.safetensors"
        write_tensors(path, tens)
        meta = {"task_name": ckpt.task, "rank": ckpt.rank, "alpha": ckpt.alpha}
        (adapter_dir / f"{ckpt.task}.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        adapter_entries.append({"task": ckpt.task, "path": f"adapters/{ckpt.task}.safetensors"})

    doc = {
        "schema": 1,
        "spec": dataclasses.asdict(bed.spec),
        "projection_order": list(PROJECTIONS),
        "activation": "relu",
        "tensors": "testbed.safetensors",
        "tasks": [
            {
                "name": t.name,
                "readout": list(t.readout),
                "samples": int(t.features.shape[0]),
                "expert_accuracy": bed.expert_scores[t.name],
            }
            for t in bed.tasks
        ],
        "adapters": adapter_entries,
        "negative_units": [list(cell) for cell in bed.negative_units],
        "coupled_pair": [list(c) for c in bed.coupled_pair] if bed.coupled_pair else None,
    }
    json_path = out / "testbed.json"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return json_path


def load_testbed(json_path: Path | str) -> SyntheticTestbed:
    """Rebuild a testbed from an export directory written by export_testbed."""
    json_path = Path(json_path)
    doc = json.loads(json_path.read_text())
    if doc.get("schema") != 1:
        raise ConfigError(f"unsupported testbed schema in {json_path}")
    spec = TestbedSpec(**doc["spec"])
    tensors, _ = read_tensors(json_path.parent / doc["tensors"])
    backbone = {}
    for layer in range(spec.num_layers):
        for proj in PROJECTIONS:
            backbone[(layer, proj)] = np.asarray(tensors[f"backbone.{layer}.{proj}"], dtype=np.float64)
    tasks = []
    scores = {}
    for entry in doc["tasks"]:
        name = entry["name"]
        tasks.append(
            TaskData(
                name=name,
                features=np.asarray(tensors[f"tasks.{name}.features"], dtype=np.float64),
                labels=np.asarray(tensors[f"tasks.{name}.labels"], dtype=np.int64),
                readout=(entry["readout"][0], entry["readout"][1]),
            )
        )
        scores[name] = float(entry["expert_accuracy"])
    adapters = [
        load_adapter(json_path.parent / entry["path"]) for entry in doc["adapters"]
    ]
    pair = doc.get("coupled_pair")
    return SyntheticTestbed(
        spec=spec,
        backbone=backbone,
        tasks=tasks,
        adapters=adapters,
        negative_units=[tuple(cell) for cell in doc["negative_units"]],
        coupled_pair=(tuple(map(tuple, pair)) if pair else None),
        expert_scores=scores,
    )
