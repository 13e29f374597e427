"""Acceptance gate: every promised behavior, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v`` to see one line per
criterion.  Tolerances and time budgets are asserted as stated; the shared
module fixtures keep the search-based criteria within their budgets by
reusing one set of ten seeded runs.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import dataclass

import numpy as np
import pytest

from loramerge.cli import main
from loramerge.cmaes import cma_ask, cma_init, cma_tell
from loramerge.fitness import BuiltinEvaluator, ExternalEvaluator, normalized_accuracy
from loramerge.masks import PruningMask, map_latent
from loramerge.merge import (
    MergeParams,
    UnitUpdate,
    corespace_bases,
    dare_mask,
    merge_units,
    merge_with_mask,
    preset_params,
    tsv_bases,
)
from loramerge.search import (
    SearchConfig,
    SearchResult,
    exhaustive_search,
    greedy_prune,
    random_report,
    run_search,
)
from loramerge.testbed import SyntheticTestbed, TestbedSpec, export_testbed, make_testbed

TA = MergeParams(method="ta", lam=1.0)


@dataclass
class Harness:
    bed: SyntheticTestbed
    evaluator: BuiltinEvaluator

    @property
    def grid(self):
        return self.bed.grid()

    @property
    def experts(self):
        return self.evaluator.expert_scores


@pytest.fixture(scope="module")
def planted() -> Harness:
    """Nine units, three planted negatives: small enough to enumerate."""
    bed = make_testbed(
        TestbedSpec(num_layers=3, num_tasks=3, dims=16, num_negatives=3, seed=2)
    )
    return Harness(bed=bed, evaluator=BuiltinEvaluator(bed))


@pytest.fixture(scope="module")
def coupled() -> Harness:
    bed = make_testbed(
        TestbedSpec(num_layers=3, num_tasks=3, dims=16, num_negatives=0, seed=2, coupled_pair=True)
    )
    return Harness(bed=bed, evaluator=BuiltinEvaluator(bed))


@pytest.fixture(scope="module")
def planted_runs(planted) -> list[tuple[SearchResult, float]]:
    """Ten seeded searches on the planted bed, with per-seed wall time."""
    runs = []
    grid = planted.grid
    for seed in range(10):
        config = SearchConfig(pop_size=16, generations=60, sigma0=0.5, max_prune=0.4, seed=seed)
        start = time.perf_counter()
        result = run_search(grid, planted.evaluator, planted.experts, config, TA)
        runs.append((result, time.perf_counter() - start))
    return runs


def brute_force_mask(latent: np.ndarray, max_prune: float) -> np.ndarray:
    """Quadratic reference: a unit is pruned when its strictly-greater count
    plus earlier ties leave it inside the budget, and its score is positive."""
    n = latent.size
    budget = math.floor(max_prune * n)
    greater = (latent[None, :] > latent[:, None]).sum(axis=1)
    ties_before = np.tril(latent[None, :] == latent[:, None], -1).sum(axis=1)
    rank = greater + ties_before
    return ((rank < budget) & (latent > 0.0)).astype(np.uint8)


def test_mask_mapping_matches_brute_force():
    rng = np.random.default_rng(12345)
    n = 192
    start = time.perf_counter()
    for _ in range(1000):
        latent = rng.standard_normal(n)
        for k in (0.0, 0.1, 0.2, 0.3, 0.5):
            assert np.array_equal(map_latent(latent, k), brute_force_mask(latent, k))
    assert time.perf_counter() - start < 1.0


def test_conservative_start_is_the_plain_merge(planted):
    grid = planted.grid
    dim = grid.num_layers * grid.num_tasks
    state = cma_init(dim, -np.ones(dim), 0.5, 16)
    mask_bits = map_latent(state.mean, 0.2)
    assert not mask_bits.any()

    zero = PruningMask.from_flat(mask_bits, num_layers=grid.num_layers, tasks=list(grid.tasks))
    masked = merge_with_mask(grid, zero, TA)
    for (layer, proj), merged in masked.entries.items():
        plain = TA.lam * sum(
            grid.unit_delta(layer, task, proj) for task in range(grid.num_tasks)
        )
        assert np.array_equal(merged, plain)


def test_cmaes_reaches_sphere_optimum():
    start = time.perf_counter()
    for seed in range(10):
        rng = np.random.default_rng(seed)
        target = rng.standard_normal(8)
        state = cma_init(8, np.zeros(8), 0.5, 16)
        best = -np.inf
        for _ in range(300):
            samples = cma_ask(state, rng)
            values = -np.sum((samples - target) ** 2, axis=1)
            cma_tell(state, samples, values)
            best = max(best, float(values.max()))
            if best >= -1e-10:
                break
        assert best >= -1e-10, f"seed {seed} stalled at {best}"
    assert time.perf_counter() - start < 10.0


def _unit(delta: np.ndarray, index: int, rank: int = 4) -> UnitUpdate:
    return UnitUpdate(delta=delta, task_index=index, rank=rank, factors=None)


def test_merge_formula_oracles():
    # Sign election keeps +3 and +2, drops the minority -1, and averages.
    scalars = [np.array([[3.0]]), np.array([[-1.0]]), np.array([[2.0]])]
    units = [_unit(d, i, rank=1) for i, d in enumerate(scalars)]
    params = MergeParams(method="ties", lam=1.0, density=1.0)
    merged = merge_units(units, params, (1, 1), [True, True, True])
    assert merged[0, 0] == 2.5

    # Random rescaled dropout is unbiased in expectation.
    rng = np.random.default_rng(0)
    delta = rng.standard_normal((8, 6))
    drop = 0.3
    total = np.zeros_like(delta)
    for trial in range(10_000):
        keep = dare_mask(delta.shape, seed=trial, task_index=0, drop_rate=drop)
        total += delta * keep / (1.0 - drop)
    relative = np.linalg.norm(total / 10_000 - delta) / np.linalg.norm(delta)
    assert relative < 0.01

    # Low-rank whitening produces orthonormal bases.
    deltas = [rng.standard_normal((12, 10)) @ np.diag([3, 1, 0.2] + [0] * 7) for _ in range(3)]
    basis_u, _, basis_v = tsv_bases(deltas, [3, 3, 3])
    eye_u = basis_u.T @ basis_u
    eye_v = basis_v.T @ basis_v
    assert np.max(np.abs(eye_u - np.eye(eye_u.shape[0]))) < 1e-8
    assert np.max(np.abs(eye_v - np.eye(eye_v.shape[0]))) < 1e-8

    # A single task passes through the spectral and joint-SVD paths intact.
    single = [_unit(deltas[0], 0)]
    for method in ("tsv", "knots"):
        params = MergeParams(method=method, lam=1.0, density=1.0)
        merged = merge_units(single, params, deltas[0].shape, [True])
        assert np.max(np.abs(merged - deltas[0])) < 1e-6

    # Shared cores reconstruct every task exactly.
    factored = []
    for index in range(3):
        a = rng.standard_normal((4, 10))
        b = rng.standard_normal((12, 4))
        factored.append(UnitUpdate(delta=b @ a, task_index=index, rank=4, factors=(b, a)))
    ref_u, ref_v = corespace_bases([unit.factors for unit in factored])
    for unit in factored:
        core = ref_u.T @ unit.delta @ ref_v
        rebuilt = ref_u @ core @ ref_v.T
        assert np.max(np.abs(rebuilt - unit.delta)) < 1e-8


def test_search_matches_exhaustive_optimum(planted, planted_runs):
    oracle = exhaustive_search(
        planted.grid, planted.evaluator, planted.experts, max_prune=0.4, params=TA
    )
    hits = 0
    for result, seconds in planted_runs:
        assert seconds < 60.0
        if result.best_fitness >= oracle.fitness - 1e-9:
            hits += 1
    assert hits >= 9, f"only {hits}/10 seeds reached the exhaustive optimum {oracle.fitness}"


def test_greedy_overprunes_the_coupled_pair(coupled):
    grid = coupled.grid
    greedy = greedy_prune(grid, coupled.evaluator, coupled.experts, TA)
    assert greedy.fitness < greedy.loo.baseline
    for seed in range(10):
        config = SearchConfig(pop_size=16, generations=60, sigma0=0.5, max_prune=0.4, seed=seed)
        result = run_search(grid, coupled.evaluator, coupled.experts, config, TA)
        assert greedy.fitness < result.best_fitness, f"seed {seed}"
        assert greedy.fitness < result.baseline_fitness, f"seed {seed}"


def test_random_pruning_sign_pattern(planted, planted_runs):
    sparsity = 3 / 9  # matches the searched masks, which settle on three units
    report = random_report(
        planted.grid,
        planted.evaluator,
        planted.experts,
        sparsity=sparsity,
        trials=10,
        seed=0,
        params=TA,
    )
    assert report.mean < report.baseline
    search_mean = float(np.mean([result.best_fitness for result, _ in planted_runs]))
    assert search_mean > report.baseline


def test_popcount_tracks_planted_negatives_across_budgets(planted):
    grid = planted.grid
    for budget_units in (3, 5, 7):
        max_prune = (budget_units + 0.5) / 9
        for seed in range(5):
            config = SearchConfig(
                pop_size=16, generations=60, sigma0=0.5, max_prune=max_prune, seed=seed
            )
            result = run_search(grid, planted.evaluator, planted.experts, config, TA)
            assert abs(result.best_mask.popcount - 3) <= 1, (
                f"budget {budget_units}, seed {seed}: popcount {result.best_mask.popcount}"
            )


def test_trace_bytes_identical_across_parallelism(planted, tmp_path):
    bed_dir = tmp_path / "bed"
    export_testbed(planted.bed, bed_dir)
    outputs = []
    for name, parallel in (("p1", "1"), ("p8", "8")):
        out = tmp_path / name
        config = {
            "adapters": [
                {"task": t.name, "path": str(bed_dir / "adapters" / f"{t.name}.safetensors")}
                for t in planted.bed.tasks
            ],
            "merge": {"method": "ta", "lambda": 1.0},
            "search": {"max_prune": 0.4},
            "evaluator": {"type": "builtin", "testbed": str(bed_dir / "testbed.json")},
            "output_dir": str(out),
            "figures": False,
        }
        path = tmp_path / f"config_{name}.json"
        path.write_text(json.dumps(config))
        assert main(["search", str(path), "--parallel", parallel]) == 0
        outputs.append(out)
    first, second = outputs
    assert (first / "trace.csv").read_bytes() == (second / "trace.csv").read_bytes()


def test_normalized_accuracy_spot_checks():
    assert 100 * normalized_accuracy(0.8657, 0.9250) == pytest.approx(93.59, abs=0.01)
    assert 100 * normalized_accuracy(0.8913, 0.8986) == pytest.approx(99.19, abs=0.01)


def test_bridge_agrees_with_builtin_evaluation(planted, tmp_path):
    json_path = export_testbed(planted.bed, tmp_path / "export")
    grid = planted.grid
    command = [sys.executable, "-m", "eval_bridge", "--testbed", str(json_path)]
    remote = ExternalEvaluator(command, tasks=[t.name for t in planted.bed.tasks], timeout=60.0)
    recipes = [
        MergeParams(method="ta", lam=1.0),
        preset_params("ties"),
        preset_params("dare"),
        preset_params("tsv"),
        preset_params("knots"),
        preset_params("corespace"),
    ]
    rng = np.random.default_rng(42)
    try:
        for trial in range(20):
            flat = np.zeros(9, dtype=np.uint8)
            pruned = rng.choice(9, size=trial % 5, replace=False)
            flat[pruned] = 1
            mask = PruningMask.from_flat(flat, num_layers=3, tasks=list(grid.tasks))
            merged = merge_with_mask(grid, mask, recipes[trial % len(recipes)])
            theirs = remote.evaluate(merged)
            ours = planted.evaluator.evaluate(merged)
            for task, value in ours.items():
                assert abs(theirs[task] - value) <= 1e-6, f"trial {trial}, {task}"
    finally:
        remote.close()


def test_search_completes_through_the_bridge(planted, tmp_path):
    json_path = export_testbed(planted.bed, tmp_path / "export")
    out = tmp_path / "run"
    config = {
        "adapters": [
            {
                "task": t.name,
                "path": str(tmp_path / "export" / "adapters" / f"{t.name}.safetensors"),
                "expert_accuracy": planted.bed.expert_scores[t.name],
            }
            for t in planted.bed.tasks
        ],
        "merge": {"method": "ta", "lambda": 1.0},
        "search": {"max_prune": 0.4},
        "evaluator": {
            "type": "external",
            "command": [sys.executable, "-m", "eval_bridge", "--testbed", str(json_path)],
            "timeout": 120,
        },
        "output_dir": str(out),
        "figures": False,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    assert main(["search", str(path)]) == 0
    run = json.loads((out / "run.json").read_text())
    assert run["best_fitness"] >= run["baseline_fitness"]
    assert (out / "trace.csv").read_text().count("\n") == 1 + 61
