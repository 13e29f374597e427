"""Merge engine oracles and invariants.

Hand-computed values are derived in comments next to each assertion. The
Monte-Carlo expectation check for dare uses a fixed seed range, so it is
deterministic: the empirical mean either sits within tolerance forever or
the implementation is wrong.
"""

from __future__ import annotations

import logging

import numpy as np
import pytest

from loramerge.adapters import AdapterCheckpoint, build_grid
from loramerge.errors import ShapeMismatchError, UnsupportedMethodError
from loramerge.masks import PruningMask
from loramerge.merge import (
    MergeParams,
    UnitUpdate,
    dare_mask,
    disjoint_mean,
    elect_sign,
    merge_units,
    merge_with_mask,
    preset_params,
    trim_topk,
)

PROJS = ("q", "k", "v", "o")


def units_from(deltas: list[np.ndarray], ranks: list[int] | None = None) -> list[UnitUpdate]:
    ranks = ranks or [min(d.shape) for d in deltas]
    return [UnitUpdate(delta=d, task_index=i, rank=r) for i, (d, r) in enumerate(zip(deltas, ranks))]


def rank_r_delta(rng: np.random.Generator, d_out: int, d_in: int, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b = rng.standard_normal((d_out, r))
    a = rng.standard_normal((r, d_in))
    return b @ a, b, a


# ---------------------------------------------------------------- params


def test_params_validation() -> None:
    MergeParams(method="ties", lam=1.2, density=0.8)  # the NLP default validates
    with pytest.raises(ValueError):
        MergeParams(method="blend")
    with pytest.raises(ValueError):
        MergeParams(method="ta", lam=0.0)
    with pytest.raises(ValueError):
        MergeParams(method="ties", density=0.0)
    with pytest.raises(ValueError):
        MergeParams(method="dare", drop_rate=1.0)
    with pytest.raises(ValueError):
        MergeParams(method="knots", inner="knots")
    with pytest.raises(ValueError):
        MergeParams(method="ta", order="sideways")


def test_presets_pin_published_hyperparameters() -> None:
    nlp = {m: preset_params(m, "nlp") for m in ("ta", "ties", "dare", "tsv", "knots", "corespace")}
    assert nlp["ta"].lam == 0.3
    assert (nlp["ties"].lam, nlp["ties"].density) == (1.2, 0.8)
    assert (nlp["dare"].lam, nlp["dare"].density, nlp["dare"].drop_rate) == (1.1, 0.8, 0.1)
    assert nlp["tsv"].lam == 0.6
    assert (nlp["knots"].lam, nlp["knots"].density, nlp["knots"].inner) == (1.1, 0.9, "ties")
    assert (nlp["corespace"].lam, nlp["corespace"].inner) == (0.5, "tsv")
    vis = {m: preset_params(m, "vision") for m in ("ta", "ties", "dare", "tsv", "knots", "corespace")}
    assert vis["ta"].lam == 0.1
    assert (vis["ties"].lam, vis["ties"].density) == (0.3, 0.4)
    assert (vis["dare"].lam, vis["dare"].density, vis["dare"].drop_rate) == (0.3, 0.2, 0.1)
    assert vis["tsv"].lam == 0.3
    assert (vis["knots"].lam, vis["knots"].density) == (0.6, 0.9)
    assert vis["corespace"].lam == 0.9


# ---------------------------------------------------------------- ta


def test_ta_is_scaled_sum() -> None:
    d1 = np.array([[1.0, -2.0], [0.0, 4.0]])
    d2 = np.array([[3.0, 3.0], [1.0, -1.0]])
    out = merge_units(units_from([d1, d2]), MergeParams(method="ta", lam=0.5), d1.shape)
    np.testing.assert_allclose(out, 0.5 * (d1 + d2), atol=0)


def test_empty_unit_list_gives_zeros() -> None:
    for method in ("ta", "ties", "dare", "tsv", "knots", "corespace"):
        out = merge_units([], MergeParams(method=method), (3, 5))
        np.testing.assert_array_equal(out, np.zeros((3, 5)))


# ---------------------------------------------------------------- ties pieces


def test_trim_keeps_ceil_fraction_with_low_index_ties() -> None:
    x = np.array([[1.0, -3.0], [2.0, -2.0]])
    # density 0.5 on 4 entries keeps 2: |-3| then tie between 2 and -2 -> lower flat index (2.0)
    np.testing.assert_array_equal(trim_topk(x, 0.5), [[0.0, -3.0], [2.0, 0.0]])
    # density 1 is the identity
    np.testing.assert_array_equal(trim_topk(x, 1.0), x)
    # ceil: density 0.3 on 4 entries keeps ceil(1.2) = 2
    assert np.count_nonzero(trim_topk(x, 0.3)) == 2


def test_elect_sign_majority_magnitude_and_zero_tie() -> None:
    trimmed = [np.array([[3.0, -1.0, 0.0]]), np.array([[-1.0, -1.0, 0.0]]), np.array([[-1.0, 3.0, 0.0]])]
    # entry 0: pos 3 vs neg 2 -> +; entry 1: pos 3 vs neg 2 -> +; entry 2: 0 vs 0 -> + by convention
    np.testing.assert_array_equal(elect_sign(trimmed), [[1.0, 1.0, 1.0]])
    # exact magnitude tie elects +
    np.testing.assert_array_equal(elect_sign([np.array([[2.0]]), np.array([[-2.0]])]), [[1.0]])


def test_disjoint_mean_skips_mismatched_and_zero() -> None:
    trimmed = [np.array([[3.0]]), np.array([[-1.0]]), np.array([[2.0]])]
    signs = np.array([[1.0]])
    np.testing.assert_allclose(disjoint_mean(trimmed, signs), [[2.5]])
    # no survivors -> 0
    np.testing.assert_array_equal(disjoint_mean([np.array([[0.0]])], signs), [[0.0]])


def test_ties_worked_scalar_example() -> None:
    deltas = [np.array([[3.0]]), np.array([[-1.0]]), np.array([[2.0]])]
    out = merge_units(units_from(deltas), MergeParams(method="ties", lam=1.0, density=1.0), (1, 1))
    np.testing.assert_allclose(out, [[2.5]])


def test_ties_lambda_homogeneity() -> None:
    rng = np.random.default_rng(5)
    deltas = [rng.standard_normal((4, 6)) for _ in range(3)]
    p1 = MergeParams(method="ties", lam=1.0, density=0.6)
    p2 = MergeParams(method="ties", lam=2.5, density=0.6)
    a = merge_units(units_from(deltas), p1, (4, 6))
    b = merge_units(units_from(deltas), p2, (4, 6))
    np.testing.assert_allclose(b, 2.5 * a, rtol=1e-12)


# ---------------------------------------------------------------- dare


def test_dare_zero_drop_equals_ties() -> None:
    rng = np.random.default_rng(8)
    deltas = [rng.standard_normal((4, 6)) for _ in range(3)]
    ties = merge_units(units_from(deltas), MergeParams(method="ties", lam=1.1, density=0.8), (4, 6))
    dare = merge_units(
        units_from(deltas), MergeParams(method="dare", lam=1.1, density=0.8, drop_rate=0.0), (4, 6)
    )
    np.testing.assert_array_equal(dare, ties)


def test_dare_mask_deterministic_and_task_keyed() -> None:
    m1 = dare_mask((4, 6), seed=3, task_index=0, drop_rate=0.3)
    m2 = dare_mask((4, 6), seed=3, task_index=0, drop_rate=0.3)
    np.testing.assert_array_equal(m1, m2)
    assert not np.array_equal(m1, dare_mask((4, 6), seed=3, task_index=1, drop_rate=0.3))
    assert not np.array_equal(m1, dare_mask((4, 6), seed=4, task_index=0, drop_rate=0.3))
    assert set(np.unique(m1)) <= {0.0, 1.0}


def test_dare_expectation_preserved() -> None:
    # E[x * mask / (1-p)] = x; empirical mean over 10^4 fixed seeds within 1%
    rng = np.random.default_rng(13)
    x = rng.standard_normal((4, 6))
    p = 0.1
    acc = np.zeros_like(x)
    trials = 10_000
    for seed in range(trials):
        acc += x * dare_mask(x.shape, seed=seed, task_index=0, drop_rate=p) / (1.0 - p)
    rel_err = np.linalg.norm(acc / trials - x) / np.linalg.norm(x)
    assert rel_err <= 0.01


def test_dare_plain_sum_variant() -> None:
    rng = np.random.default_rng(21)
    deltas = [rng.standard_normal((3, 3)) for _ in range(2)]
    params = MergeParams(method="dare", lam=2.0, drop_rate=0.0, dare_aggregate="sum")
    out = merge_units(units_from(deltas), params, (3, 3))
    np.testing.assert_allclose(out, 2.0 * (deltas[0] + deltas[1]), rtol=1e-12)


def test_dare_depends_on_task_order() -> None:
    rng = np.random.default_rng(2)
    deltas = [rng.standard_normal((4, 4)) for _ in range(2)]
    params = MergeParams(method="dare", drop_rate=0.4, seed=0)
    fwd = merge_units(units_from(deltas), params, (4, 4))
    rev = merge_units(units_from(deltas[::-1]), params, (4, 4))
    assert not np.allclose(fwd, rev)


# ---------------------------------------------------------------- tsv


def test_tsv_single_task_identity() -> None:
    rng = np.random.default_rng(31)
    delta, _, _ = rank_r_delta(rng, 8, 6, 2)
    out = merge_units(units_from([delta], ranks=[2]), MergeParams(method="tsv", lam=1.0), (8, 6))
    np.testing.assert_allclose(out, delta, atol=1e-6)


def test_tsv_orthogonal_tasks_add() -> None:
    # tasks with orthogonal row and column spaces merge to the plain sum
    d1 = np.zeros((6, 6))
    d1[0:2, 0:2] = np.array([[2.0, 1.0], [1.0, 3.0]])
    d2 = np.zeros((6, 6))
    d2[3:5, 3:5] = np.array([[1.0, -1.0], [0.5, 2.0]])
    out = merge_units(units_from([d1, d2], ranks=[2, 2]), MergeParams(method="tsv", lam=1.0), (6, 6))
    np.testing.assert_allclose(out, d1 + d2, atol=1e-8)


def test_tsv_basis_is_orthonormal_even_for_duplicates() -> None:
    from loramerge.merge import tsv_bases

    rng = np.random.default_rng(44)
    delta, _, _ = rank_r_delta(rng, 8, 8, 2)
    u_perp, sigmas, v_perp = tsv_bases([delta, delta], ranks=[2, 2])
    eye = np.eye(u_perp.shape[1])
    assert np.linalg.norm(u_perp.T @ u_perp - eye) <= 1e-8
    assert np.linalg.norm(v_perp.T @ v_perp - eye) <= 1e-8


def test_tsv_truncates_when_rank_exceeds_dims(caplog: pytest.LogCaptureFixture) -> None:
    rng = np.random.default_rng(50)
    deltas = [rank_r_delta(rng, 3, 3, 2)[0] for _ in range(3)]  # 3*2 = 6 > 3
    with caplog.at_level(logging.WARNING):
        out = merge_units(units_from(deltas, ranks=[2, 2, 2]), MergeParams(method="tsv"), (3, 3))
    assert any("truncat" in rec.message for rec in caplog.records)
    assert out.shape == (3, 3)
    from loramerge.merge import tsv_bases

    u_perp, _, _ = tsv_bases(deltas, ranks=[2, 2, 2])
    assert u_perp.shape[1] == 3
    assert np.linalg.norm(u_perp.T @ u_perp - np.eye(3)) <= 1e-8


def test_tsv_permutation_invariance() -> None:
    rng = np.random.default_rng(60)
    deltas = [rank_r_delta(rng, 8, 6, 2)[0] for _ in range(3)]
    params = MergeParams(method="tsv", lam=0.6)
    fwd = merge_units(units_from(deltas, ranks=[2, 2, 2]), params, (8, 6))
    perm = [deltas[2], deltas[0], deltas[1]]
    rev = merge_units(units_from(perm, ranks=[2, 2, 2]), params, (8, 6))
    assert np.linalg.norm(fwd - rev) / np.linalg.norm(fwd) <= 1e-6


# ---------------------------------------------------------------- knots


def test_knots_single_task_round_trip() -> None:
    rng = np.random.default_rng(71)
    delta, _, _ = rank_r_delta(rng, 8, 6, 2)
    params = MergeParams(method="knots", lam=1.0, inner="ta")
    out = merge_units(units_from([delta], ranks=[2]), params, (8, 6))
    np.testing.assert_allclose(out, delta, atol=1e-6)


def test_knots_identical_tasks_average_with_half_lambda() -> None:
    rng = np.random.default_rng(72)
    delta, _, _ = rank_r_delta(rng, 8, 6, 2)
    params = MergeParams(method="knots", lam=0.5, inner="ta")
    out = merge_units(units_from([delta, delta.copy()], ranks=[2, 2]), params, (8, 6))
    np.testing.assert_allclose(out, delta, atol=1e-6)


def test_knots_inner_ties_runs_and_scales() -> None:
    rng = np.random.default_rng(73)
    deltas = [rank_r_delta(rng, 8, 6, 2)[0] for _ in range(3)]
    p1 = MergeParams(method="knots", lam=1.0, inner="ties", density=0.9)
    p2 = MergeParams(method="knots", lam=1.1, inner="ties", density=0.9)
    a = merge_units(units_from(deltas, ranks=[2] * 3), p1, (8, 6))
    b = merge_units(units_from(deltas, ranks=[2] * 3), p2, (8, 6))
    np.testing.assert_allclose(b, 1.1 * a, rtol=1e-10)


# ---------------------------------------------------------------- corespace


def corespace_units(rng: np.random.Generator, n: int = 3, d_out: int = 8, d_in: int = 6, r: int = 2):
    units = []
    raw = []
    for i in range(n):
        delta, b, a = rank_r_delta(rng, d_out, d_in, r)
        units.append(UnitUpdate(delta=delta, task_index=i, rank=r, factors=(b, a)))
        raw.append(delta)
    return units, raw


def test_corespace_reconstruction_is_exact() -> None:
    from loramerge.merge import corespace_bases

    rng = np.random.default_rng(81)
    units, raw = corespace_units(rng)
    u_ref, v_ref = corespace_bases([u.factors for u in units])
    for unit, delta in zip(units, raw):
        core = u_ref.T @ delta @ v_ref
        np.testing.assert_allclose(u_ref @ core @ v_ref.T, delta, atol=1e-8)


def test_corespace_inner_sum_matches_full_space_sum() -> None:
    rng = np.random.default_rng(82)
    units, raw = corespace_units(rng)
    params = MergeParams(method="corespace", lam=1.0, inner="ta")
    out = merge_units(units, params, raw[0].shape)
    np.testing.assert_allclose(out, sum(raw), atol=1e-6)


def test_corespace_requires_factors() -> None:
    rng = np.random.default_rng(83)
    deltas = [rng.standard_normal((4, 4)) for _ in range(2)]
    with pytest.raises(UnsupportedMethodError):
        merge_units(units_from(deltas), MergeParams(method="corespace"), (4, 4))


def test_corespace_single_task_identity() -> None:
    rng = np.random.default_rng(84)
    units, raw = corespace_units(rng, n=1)
    out = merge_units(units, MergeParams(method="corespace", lam=1.0, inner="ta"), raw[0].shape)
    np.testing.assert_allclose(out, raw[0], atol=1e-6)


# ---------------------------------------------------------------- shared invariants


@pytest.mark.parametrize("method", ["ta", "ties", "dare", "tsv", "knots", "corespace"])
def test_single_task_identity_all_methods(method: str) -> None:
    rng = np.random.default_rng(90)
    delta, b, a = rank_r_delta(rng, 8, 6, 2)
    unit = UnitUpdate(delta=delta, task_index=0, rank=2, factors=(b, a))
    params = MergeParams(method=method, lam=1.0, density=1.0, drop_rate=0.0, inner="ta")
    out = merge_units([unit], params, (8, 6))
    np.testing.assert_allclose(out, delta, atol=1e-6)


@pytest.mark.parametrize("method", ["ta", "ties"])
def test_permutation_invariance_elementwise_methods(method: str) -> None:
    rng = np.random.default_rng(91)
    deltas = [rng.standard_normal((5, 7)) for _ in range(4)]
    params = MergeParams(method=method, lam=0.7, density=0.6)
    fwd = merge_units(units_from(deltas), params, (5, 7))
    order = [3, 1, 0, 2]
    rev = merge_units(units_from([deltas[i] for i in order]), params, (5, 7))
    np.testing.assert_allclose(fwd, rev, rtol=1e-6, atol=1e-12)


# ---------------------------------------------------------------- masked merging


def grid_of(rng: np.random.Generator, tasks: int = 3, layers: int = 2, d: int = 6, r: int = 2):
    ckpts = []
    for t in range(tasks):
        layers_map = {}
        for layer in range(layers):
            layers_map[layer] = {
                p: (rng.standard_normal((r, d)), rng.standard_normal((d, r))) for p in PROJS
            }
        ckpts.append(AdapterCheckpoint(task=f"t{t}", rank=r, alpha=float(r), layers=layers_map))
    return build_grid(ckpts)


def test_zero_mask_equals_unmasked_bit_for_bit() -> None:
    rng = np.random.default_rng(100)
    grid = grid_of(rng)
    params = MergeParams(method="ta", lam=0.3)
    zero = PruningMask.zeros(num_layers=grid.num_layers, tasks=grid.tasks)
    merged = merge_with_mask(grid, zero, params)
    again = merge_with_mask(grid, zero, params)
    for key, arr in merged.entries.items():
        np.testing.assert_array_equal(arr, again.entries[key])
    assert set(merged.entries) == {(l, p) for l in range(2) for p in PROJS}


def test_full_mask_gives_zero_deltas() -> None:
    rng = np.random.default_rng(101)
    grid = grid_of(rng)
    full = PruningMask(bits=np.ones((2, 3), dtype=np.uint8), tasks=grid.tasks)
    merged = merge_with_mask(grid, full, MergeParams(method="ties", density=0.8))
    for arr in merged.entries.values():
        np.testing.assert_array_equal(arr, np.zeros_like(arr))


def test_pruned_unit_drops_all_four_projections() -> None:
    rng = np.random.default_rng(102)
    grid = grid_of(rng)
    params = MergeParams(method="ta", lam=1.0)
    zero = PruningMask.zeros(num_layers=2, tasks=grid.tasks)
    bits = zero.bits.copy()
    bits[1, 0] = 1  # prune task 0 at layer 1
    masked = merge_with_mask(grid, PruningMask(bits=bits, tasks=grid.tasks), params)
    base = merge_with_mask(grid, zero, params)
    for proj in PROJS:
        assert not np.allclose(masked.entries[(1, proj)], base.entries[(1, proj)])
        np.testing.assert_array_equal(masked.entries[(0, proj)], base.entries[(0, proj)])
        expected = base.entries[(1, proj)] - grid.unit_delta(1, 0, proj)
        np.testing.assert_allclose(masked.entries[(1, proj)], expected, rtol=1e-12)


def test_mask_shape_mismatch_rejected() -> None:
    rng = np.random.default_rng(103)
    grid = grid_of(rng)
    wrong = PruningMask.zeros(num_layers=3, tasks=grid.tasks)
    with pytest.raises(ShapeMismatchError):
        merge_with_mask(grid, wrong, MergeParams(method="ta"))


def test_order_only_affects_subspace_methods() -> None:
    rng = np.random.default_rng(104)
    grid = grid_of(rng)
    bits = np.zeros((2, 3), dtype=np.uint8)
    bits[0, 1] = 1
    mask = PruningMask(bits=bits, tasks=grid.tasks)
    for method in ("ta", "ties"):
        pa = merge_with_mask(grid, mask, MergeParams(method=method, order="prune_then_align"))
        ap = merge_with_mask(grid, mask, MergeParams(method=method, order="align_then_prune"))
        for key in pa.entries:
            np.testing.assert_array_equal(pa.entries[key], ap.entries[key])
    knots_pa = merge_with_mask(
        grid, mask, MergeParams(method="knots", inner="ties", density=0.5, order="prune_then_align")
    )
    knots_ap = merge_with_mask(
        grid, mask, MergeParams(method="knots", inner="ties", density=0.5, order="align_then_prune")
    )
    assert any(
        not np.allclose(knots_pa.entries[key], knots_ap.entries[key]) for key in knots_pa.entries
    )
