"""Evolutionary search for negative modules, plus diagnostic baselines.

The driver samples latent vectors with CMA-ES, maps each to a budgeted
pruning mask, merges the surviving units, scores the merge, and feeds the
scores back as rank-based fitness.  The unpruned merge is evaluated once up
front as generation 0, so the reported best can never fall below the plain
merge.  Diagnostics: leave-one-out impact scan, the greedy prune-all-positives
heuristic, uniform random pruning at matched sparsity, and an exhaustive
oracle for grids small enough to enumerate.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import ModuleGrid
from .cmaes import CmaState, cma_ask, cma_init, cma_tell
from .errors import CheckpointError, EvaluatorError, SearchAbortedError
from .fitness import ExpertScores, fitness
from .masks import PruningMask, map_latent
from .merge import MergeParams, merge_with_mask

_CHECKPOINT_VERSION = 1
_EXHAUSTIVE_CAP = 16


@dataclass(frozen=True)
class SearchConfig:
    pop_size: int = 16
    generations: int = 60
    sigma0: float = 0.5
    max_prune: float = 0.2
    seed: int = 0
    parallelism: int = 1
    subsample: int | None = None

    def __post_init__(self) -> None:
        if self.pop_size < 2:
            raise ValueError(f"pop_size must be at least 2, got {self.pop_size}")
        if self.generations < 1:
            raise ValueError(f"generations must be at least 1, got {self.generations}")
        if self.sigma0 <= 0.0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0}")
        if not 0.0 <= self.max_prune <= 1.0:
            raise ValueError(f"max_prune must be in [0, 1], got {self.max_prune}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.parallelism < 1:
            raise ValueError(f"parallelism must be at least 1, got {self.parallelism}")
        if self.subsample is not None and self.subsample < 1:
            raise ValueError(f"subsample must be positive, got {self.subsample}")


@dataclass(frozen=True)
class TraceRow:
    generation: int
    best_val_fitness: float
    best_ever_fitness: float
    popcount: int


@dataclass
class SearchResult:
    best_latent: np.ndarray
    best_mask: PruningMask
    best_fitness: float
    found_at: int
    trace: list[TraceRow]
    seconds: list[float]
    baseline_fitness: float


@dataclass
class _Best:
    fitness: float
    latent: np.ndarray
    mask: PruningMask
    generation: int


def _candidate_stream(seed: int, index: int) -> np.random.Generator:
    """Independent RNG stream for subsampled evaluation of one candidate."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def _score(
    grid: ModuleGrid,
    mask: PruningMask,
    params: MergeParams,
    evaluator,
    experts: ExpertScores,
    rng: np.random.Generator | None,
) -> float:
    merged = merge_with_mask(grid, mask, params)
    return fitness(evaluator.evaluate(merged, rng=rng), experts)


def _score_generation(
    grid: ModuleGrid,
    masks: list[PruningMask],
    params: MergeParams,
    evaluator,
    experts: ExpertScores,
    streams: list[np.random.Generator | None],
    parallelism: int,
    generation: int,
) -> np.ndarray:
    """Scores one generation; results are collected in candidate order so the
    outcome is identical at any parallelism degree."""

    def job(i: int) -> float:
        return _score(grid, masks[i], params, evaluator, experts, streams[i])

    values = np.empty(len(masks))
    if parallelism == 1:
        for i in range(len(masks)):
            try:
                values[i] = job(i)
            except EvaluatorError as exc:
                raise SearchAbortedError(generation, i, exc) from exc
        return values
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(job, i) for i in range(len(masks))]
        for i, future in enumerate(futures):
            try:
                values[i] = future.result()
            except EvaluatorError as exc:
                for pending in futures[i + 1 :]:
                    pending.cancel()
                raise SearchAbortedError(generation, i, exc) from exc
    return values


def _mask_from_latent(latent: np.ndarray, grid: ModuleGrid, max_prune: float) -> PruningMask:
    flat = map_latent(latent, max_prune)
    return PruningMask.from_flat(flat, num_layers=grid.num_layers, tasks=grid.tasks)


def _save_checkpoint(
    directory: Path,
    config: SearchConfig,
    params: MergeParams,
    grid: ModuleGrid,
    state: CmaState,
    rng: np.random.Generator,
    best: _Best,
    trace: list[TraceRow],
    seconds: list[float],
    generation: int,
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "checkpoint_C.npy", state.cov)
    doc = {
        "version": _CHECKPOINT_VERSION,
        "generation": generation,
        "config": {
            "pop_size": config.pop_size,
            "generations": config.generations,
            "sigma0": config.sigma0,
            "max_prune": config.max_prune,
            "seed": config.seed,
            "subsample": config.subsample,
        },
        "params": {
            "method": params.method,
            "lambda": params.lam,
            "density": params.density,
            "drop_rate": params.drop_rate,
            "inner": params.inner,
            "order": params.order,
            "rank": params.rank,
            "seed": params.seed,
        },
        "tasks": grid.tasks,
        "num_layers": grid.num_layers,
        "cma": {
            "mean": state.mean.tolist(),
            "sigma": state.sigma,
            "ps": state.ps.tolist(),
            "pc": state.pc.tolist(),
            "gen": state.gen,
        },
        "rng_state": rng.bit_generator.state,
        "best": {
            "fitness": best.fitness,
            "generation": best.generation,
            "latent": best.latent.tolist(),
            "rows": ["".join(str(int(b)) for b in row) for row in best.mask.bits],
        },
        "trace": [[r.generation, r.best_val_fitness, r.best_ever_fitness, r.popcount] for r in trace],
        "seconds": seconds,
    }
    tmp = directory / "checkpoint.json.tmp"
    tmp.write_text(json.dumps(doc) + "\n")
    tmp.replace(directory / "checkpoint.json")


def _load_checkpoint(
    directory: Path, config: SearchConfig, params: MergeParams, grid: ModuleGrid
) -> tuple[CmaState, np.random.Generator, _Best, list[TraceRow], list[float], int]:
    path = directory / "checkpoint.json"
    if not path.exists():
        raise CheckpointError(f"no checkpoint found at {path}")
    try:
        doc = json.loads(path.read_text())
        cov = np.load(directory / "checkpoint_C.npy")
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint in {directory}: {exc}") from exc
    if doc.get("version") != _CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    saved_cfg = doc["config"]
    current_cfg = {
        "pop_size": config.pop_size,
        "generations": config.generations,
        "sigma0": config.sigma0,
        "max_prune": config.max_prune,
        "seed": config.seed,
        "subsample": config.subsample,
    }
    if saved_cfg != current_cfg:
        diffs = [k for k in current_cfg if saved_cfg.get(k) != current_cfg[k]]
        raise CheckpointError(f"checkpoint config differs on: {', '.join(diffs)}")
    if doc["tasks"] != grid.tasks or doc["num_layers"] != grid.num_layers:
        raise CheckpointError("checkpoint was produced for a different module grid")
    saved_params = doc["params"]
    current_params = {
        "method": params.method,
        "lambda": params.lam,
        "density": params.density,
        "drop_rate": params.drop_rate,
        "inner": params.inner,
        "order": params.order,
        "rank": params.rank,
        "seed": params.seed,
    }
    if saved_params != current_params:
        raise CheckpointError("checkpoint merge parameters differ from the requested ones")

    cma = doc["cma"]
    state = CmaState.from_dynamic(
        dim=grid.num_layers * grid.num_tasks,
        pop=config.pop_size,
        mean=np.asarray(cma["mean"], dtype=np.float64),
        sigma=float(cma["sigma"]),
        cov=cov,
        ps=np.asarray(cma["ps"], dtype=np.float64),
        pc=np.asarray(cma["pc"], dtype=np.float64),
        gen=int(cma["gen"]),
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    bits = np.array([[int(ch) for ch in row] for row in doc["best"]["rows"]], dtype=np.uint8)
    best = _Best(
        fitness=float(doc["best"]["fitness"]),
        latent=np.asarray(doc["best"]["latent"], dtype=np.float64),
        mask=PruningMask(bits=bits, tasks=list(grid.tasks)),
        generation=int(doc["best"]["generation"]),
    )
    trace = [TraceRow(int(g), float(bv), float(be), int(pc)) for g, bv, be, pc in doc["trace"]]
    seconds = [float(s) for s in doc["seconds"]]
    return state, rng, best, trace, seconds, int(doc["generation"])


def run_search(
    grid: ModuleGrid,
    evaluator,
    experts: ExpertScores,
    config: SearchConfig,
    params: MergeParams,
    *,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    progress=None,
) -> SearchResult:
    """Runs the full search loop and returns the best mask ever evaluated.

    When ``checkpoint_dir`` is set, state is persisted after every completed
    generation; ``resume=True`` continues an interrupted run and yields results
    identical to an uninterrupted one.  Evaluator transport failures abort the
    current generation and raise SearchAbortedError naming the candidate; the
    checkpoint from the previous generation remains valid.
    """
    if resume and checkpoint_dir is None:
        raise CheckpointError("resume requested but no checkpoint directory given")
    directory = Path(checkpoint_dir) if checkpoint_dir is not None else None
    dim = grid.num_layers * grid.num_tasks

    if resume:
        state, rng, best, trace, seconds, done = _load_checkpoint(directory, config, params, grid)
        start = done + 1
    else:
        state = cma_init(dim, -np.ones(dim), config.sigma0, config.pop_size)
        rng = np.random.default_rng(config.seed)
        started = time.perf_counter()
        zero = PruningMask.zeros(num_layers=grid.num_layers, tasks=list(grid.tasks))
        stream = _candidate_stream(config.seed, 0) if config.subsample is not None else None
        try:
            baseline = _score(grid, zero, params, evaluator, experts, stream)
        except EvaluatorError as exc:
            raise SearchAbortedError(0, 0, exc) from exc
        best = _Best(fitness=baseline, latent=state.mean.copy(), mask=zero, generation=0)
        trace = [TraceRow(0, baseline, baseline, 0)]
        seconds = [time.perf_counter() - started]
        start = 1
        if directory is not None:
            _save_checkpoint(
                directory, config, params, grid, state, rng, best, trace, seconds, 0
            )
        if progress is not None:
            progress(trace[0])

    for gen in range(start, config.generations + 1):
        started = time.perf_counter()
        latents = cma_ask(state, rng)
        masks = [_mask_from_latent(z, grid, config.max_prune) for z in latents]
        streams: list[np.random.Generator | None] = [
            _candidate_stream(config.seed, gen * config.pop_size + i + 1)
            if config.subsample is not None
            else None
            for i in range(config.pop_size)
        ]
        values = _score_generation(
            grid, masks, params, evaluator, experts, streams, config.parallelism, gen
        )
        finite = np.isfinite(values)
        if finite.any():
            ranked = np.where(finite, values, -np.inf)
            top = int(np.argmax(ranked))
            best_val = float(values[top])
            popcount = masks[top].popcount
            if best_val > best.fitness:
                best = _Best(
                    fitness=best_val,
                    latent=latents[top].copy(),
                    mask=masks[top],
                    generation=gen,
                )
        else:
            best_val = float("nan")
            popcount = 0
        trace.append(TraceRow(gen, best_val, best.fitness, popcount))
        cma_tell(state, latents, values)
        seconds.append(time.perf_counter() - started)
        if directory is not None:
            _save_checkpoint(
                directory, config, params, grid, state, rng, best, trace, seconds, gen
            )
        if progress is not None:
            progress(trace[-1])

    return SearchResult(
        best_latent=best.latent,
        best_mask=best.mask,
        best_fitness=best.fitness,
        found_at=best.generation,
        trace=trace,
        seconds=seconds,
        baseline_fitness=trace[0].best_val_fitness,
    )


@dataclass
class LeaveOneOutResult:
    baseline: float
    fitnesses: np.ndarray  # (L, T); fitness with only unit (l, t) pruned
    impacts: np.ndarray  # (L, T); fitnesses - baseline
    tasks: list[str] = field(default_factory=list)


def leave_one_out(
    grid: ModuleGrid, evaluator, experts: ExpertScores, params: MergeParams
) -> LeaveOneOutResult:
    """Impact of removing each unit alone: positive impact means the merge is
    better off without that unit."""
    zero = PruningMask.zeros(num_layers=grid.num_layers, tasks=list(grid.tasks))
    baseline = _score(grid, zero, params, evaluator, experts, None)
    fitnesses = np.zeros((grid.num_layers, grid.num_tasks))
    for layer in range(grid.num_layers):
        for task in range(grid.num_tasks):
            bits = np.zeros((grid.num_layers, grid.num_tasks), dtype=np.uint8)
            bits[layer, task] = 1
            mask = PruningMask(bits=bits, tasks=list(grid.tasks))
            fitnesses[layer, task] = _score(grid, mask, params, evaluator, experts, None)
    return LeaveOneOutResult(
        baseline=baseline,
        fitnesses=fitnesses,
        impacts=fitnesses - baseline,
        tasks=list(grid.tasks),
    )


@dataclass
class GreedyResult:
    mask: PruningMask
    fitness: float
    loo: LeaveOneOutResult


def greedy_prune(
    grid: ModuleGrid, evaluator, experts: ExpertScores, params: MergeParams
) -> GreedyResult:
    """Prunes every unit whose individual removal helps, all at once."""
    loo = leave_one_out(grid, evaluator, experts, params)
    bits = (loo.impacts > 0.0).astype(np.uint8)
    mask = PruningMask(bits=bits, tasks=list(grid.tasks))
    value = _score(grid, mask, params, evaluator, experts, None)
    return GreedyResult(mask=mask, fitness=value, loo=loo)


def random_prune(
    num_layers: int, tasks: list[str], sparsity: float, rng: np.random.Generator
) -> PruningMask:
    """Uniform random mask with popcount = round(sparsity * N)."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    n = num_layers * len(tasks)
    popcount = round(sparsity * n)
    flat = np.zeros(n, dtype=np.uint8)
    if popcount:
        flat[rng.choice(n, size=popcount, replace=False)] = 1
    return PruningMask.from_flat(flat, num_layers=num_layers, tasks=list(tasks))


@dataclass
class RandomReport:
    baseline: float
    fitnesses: list[float]
    masks: list[PruningMask]
    mean: float
    std: float
    sparsity: float


def random_report(
    grid: ModuleGrid,
    evaluator,
    experts: ExpertScores,
    *,
    sparsity: float,
    trials: int,
    seed: int,
    params: MergeParams,
) -> RandomReport:
    """Fitness distribution of random pruning at a fixed sparsity."""
    if trials < 2:
        raise ValueError(f"trials must be at least 2, got {trials}")
    zero = PruningMask.zeros(num_layers=grid.num_layers, tasks=list(grid.tasks))
    baseline = _score(grid, zero, params, evaluator, experts, None)
    rng = np.random.default_rng(seed)
    values = []
    masks = []
    for _ in range(trials):
        mask = random_prune(grid.num_layers, grid.tasks, sparsity, rng)
        masks.append(mask)
        values.append(_score(grid, mask, params, evaluator, experts, None))
    return RandomReport(
        baseline=baseline,
        fitnesses=values,
        masks=masks,
        mean=float(np.mean(values)),
        std=float(np.std(values, ddof=1)),
        sparsity=sparsity,
    )


@dataclass
class ExhaustiveResult:
    mask: PruningMask
    fitness: float
    evaluations: int


def exhaustive_search(
    grid: ModuleGrid, evaluator, experts: ExpertScores, *, max_prune: float, params: MergeParams
) -> ExhaustiveResult:
    """Ground-truth optimum over every budget-respecting mask.

    Enumerates all 2^N masks in lexicographic order and keeps the strictly
    best, so ties resolve to the lexicographically smallest mask.  Guarded to
    N <= 16 units.
    """
    n = grid.num_layers * grid.num_tasks
    if n > _EXHAUSTIVE_CAP:
        raise ValueError(f"exhaustive search is capped at {_EXHAUSTIVE_CAP} units, grid has {n}")
    budget = math.floor(max_prune * n)
    best_bits: tuple[int, ...] | None = None
    best_value = -np.inf
    evaluations = 0
    for bits in itertools.product((0, 1), repeat=n):
        if sum(bits) > budget:
            continue
        mask = PruningMask.from_flat(
            np.array(bits, dtype=np.uint8), num_layers=grid.num_layers, tasks=list(grid.tasks)
        )
        value = _score(grid, mask, params, evaluator, experts, None)
        evaluations += 1
        if value > best_value:
            best_value = value
            best_bits = bits
    assert best_bits is not None  # zero mask always qualifies
    mask = PruningMask.from_flat(
        np.array(best_bits, dtype=np.uint8), num_layers=grid.num_layers, tasks=list(grid.tasks)
    )
    return ExhaustiveResult(mask=mask, fitness=float(best_value), evaluations=evaluations)
