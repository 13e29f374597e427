"""Merging algorithms over per-unit dense updates.

All arithmetic is float64. Every method scales its aggregate by lam as the
last step, so lam-homogeneity holds by construction. An empty unit list
always merges to a zero matrix.

Methods
    ta         scaled sum of task updates
    ties       trim small magnitudes, elect a sign per entry by total
               magnitude, average the sign-matching survivors
    dare       Bernoulli-drop entries per task, rescale survivors by
               1/(1-p), then aggregate with ties (or a plain sum)
    tsv        per-task truncated SVD, orthogonalize the concatenated
               singular bases (polar factor), recombine
    knots      SVD of the column-wise task concatenation for a shared
               left basis, inner-merge the per-task right factors
    corespace  shared bases from concatenated low-rank factors, inner-merge
               the small core matrices, reconstruct

For knots and corespace the order field decides whether pruned units still
shape the shared bases (align_then_prune) or are dropped before alignment
(prune_then_align). Elementwise methods are unaffected by order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import ModuleGrid
from .errors import ShapeMismatchError, UnsupportedMethodError
from .masks import PruningMask

logger = logging.getLogger(__name__)

METHODS = ("ta", "ties", "dare", "tsv", "knots", "corespace")
INNER_METHODS = ("ta", "ties", "dare", "tsv")
ORDERS = ("prune_then_align", "align_then_prune")


@dataclass(frozen=True)
class MergeParams:
    """Validated merge hyperparameters.

    density is the fraction of entries ties/dare keep when trimming;
    drop_rate is dare's Bernoulli drop probability p; rank overrides the
    per-task truncation rank for tsv (default: each adapter's own rank);
    inner is the merge applied inside knots/corespace and cannot itself be
    a subspace method.
    """

    method: str
    lam: float = 1.0
    density: float = 1.0
    drop_rate: float = 0.1
    inner: str = "ties"
    order: str = "prune_then_align"
    rank: int | None = None
    seed: int = 0
    dare_aggregate: str = "ties"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; known: {METHODS}")
        if not self.lam > 0.0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if not 0.0 < self.density <= 1.0:
            raise ValueError(f"density must be in (0, 1], got {self.density}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if self.inner not in INNER_METHODS:
            raise ValueError(f"inner merge must be one of {INNER_METHODS}, got {self.inner!r}")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.rank is not None and self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.dare_aggregate not in ("ties", "sum"):
            raise ValueError(f"dare_aggregate must be 'ties' or 'sum', got {self.dare_aggregate!r}")


# Published tuning grids: lam, trim density, drop rate per benchmark family.
_PRESETS = {
    "nlp": {
        "ta": dict(lam=0.3),
        "ties": dict(lam=1.2, density=0.8),
        "dare": dict(lam=1.1, density=0.8, drop_rate=0.1),
        "tsv": dict(lam=0.6),
        "knots": dict(lam=1.1, density=0.9, inner="ties"),
        "corespace": dict(lam=0.5, inner="tsv"),
    },
    "vision": {
        "ta": dict(lam=0.1),
        "ties": dict(lam=0.3, density=0.4),
        "dare": dict(lam=0.3, density=0.2, drop_rate=0.1),
        "tsv": dict(lam=0.3),
        "knots": dict(lam=0.6, density=0.9, inner="ties"),
        "corespace": dict(lam=0.9, inner="tsv"),
    },
}


def preset_params(method: str, benchmark: str = "nlp", **overrides: object) -> MergeParams:
    """Tuned defaults per method and benchmark family ('nlp' or 'vision')."""
    try:
        base = _PRESETS[benchmark][method]
    except KeyError:
        raise ValueError(
            f"no preset for method={method!r} benchmark={benchmark!r}"
        ) from None
    params = MergeParams(method=method, **base)
    return replace(params, **overrides) if overrides else params


@dataclass
class UnitUpdate:
    """One task's dense update for a single (layer, projection) slot."""

    delta: np.ndarray
    task_index: int
    rank: int
    factors: tuple[np.ndarray, np.ndarray] | None = None  # (B * alpha/rank, A)


# ---------------------------------------------------------------- ties pieces


def trim_topk(delta: np.ndarray, density: float) -> np.ndarray:
    """Keeps the ceil(density * numel) largest-magnitude entries, zeroes the
    rest. Ties break toward the lower flat index. The count is computed with
    a 1e-9 guard so exact-decimal densities are not hurt by float noise."""
    flat = delta.reshape(-1)
    keep = min(flat.size, math.ceil(density * flat.size - 1e-9))
    out = np.zeros_like(flat)
    order = np.argsort(-np.abs(flat), kind="stable")[:keep]
    out[order] = flat[order]
    return out.reshape(delta.shape)


def elect_sign(trimmed: list[np.ndarray]) -> np.ndarray:
    """Per-entry sign with the larger total magnitude; ties and all-zero
    entries elect +."""
    stack = np.stack(trimmed)
    pos = np.where(stack > 0.0, stack, 0.0).sum(axis=0)
    neg = np.where(stack < 0.0, -stack, 0.0).sum(axis=0)
    return np.where(pos >= neg, 1.0, -1.0)


def disjoint_mean(trimmed: list[np.ndarray], signs: np.ndarray) -> np.ndarray:
    """Mean over nonzero entries whose sign matches the election; entries
    with no survivors become 0."""
    stack = np.stack(trimmed)
    match = (np.sign(stack) == signs) & (stack != 0.0)
    total = np.where(match, stack, 0.0).sum(axis=0)
    count = match.sum(axis=0)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def _merge_ta(deltas: list[np.ndarray], lam: float) -> np.ndarray:
    return lam * np.sum(deltas, axis=0)


def _merge_ties(deltas: list[np.ndarray], lam: float, density: float) -> np.ndarray:
    trimmed = [trim_topk(d, density) for d in deltas]
    signs = elect_sign(trimmed)
    return lam * disjoint_mean(trimmed, signs)


# ---------------------------------------------------------------- dare


def dare_mask(
    shape: tuple[int, ...], *, seed: int, task_index: int, drop_rate: float
) -> np.ndarray:
    """Keep-mask (1 keeps) from a counter-based stream keyed by
    (seed, task position); entry j consumes draw j of that stream, so the
    mask is identical regardless of worker count or call order."""
    key = np.array([seed, task_index], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return (gen.random(shape) < 1.0 - drop_rate).astype(np.float64)


def _merge_dare(
    deltas: list[np.ndarray], task_indices: list[int], params: MergeParams
) -> np.ndarray:
    p = params.drop_rate
    rescaled = [
        d * dare_mask(d.shape, seed=params.seed, task_index=ti, drop_rate=p) / (1.0 - p)
        for d, ti in zip(deltas, task_indices)
    ]
    if params.dare_aggregate == "sum":
        return _merge_ta(rescaled, params.lam)
    return _merge_ties(rescaled, params.lam, params.density)


# ---------------------------------------------------------------- tsv


def _polar(mat: np.ndarray) -> np.ndarray:
    p, _, qh = np.linalg.svd(mat, full_matrices=False)
    return p @ qh


def tsv_bases(
    deltas: list[np.ndarray], ranks: list[int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Concatenates per-task truncated singular triplets and orthogonalizes
    the stacked bases via their polar factors. When the concatenated rank
    exceeds min(d_out, d_in), the globally smallest singular directions are
    dropped first (with a warning) so the bases stay orthonormal."""
    d_out, d_in = deltas[0].shape
    sigmas: list[float] = []
    u_cols: list[np.ndarray] = []
    v_cols: list[np.ndarray] = []
    for delta, rank in zip(deltas, ranks):
        u, s, vh = np.linalg.svd(delta, full_matrices=False)
        r_eff = min(rank, s.shape[0])
        sigmas.extend(s[:r_eff])
        u_cols.extend(u[:, i] for i in range(r_eff))
        v_cols.extend(vh[i, :] for i in range(r_eff))
    total = len(sigmas)
    cap = min(d_out, d_in)
    keep = np.arange(total)
    if total > cap:
        logger.warning(
            "tsv: concatenated rank %d exceeds min dimension %d; truncating to the "
            "%d largest singular directions",
            total,
            cap,
            cap,
        )
        keep = np.sort(np.argsort(-np.asarray(sigmas), kind="stable")[:cap])
    sig = np.asarray(sigmas)[keep]
    u_cat = np.column_stack([u_cols[i] for i in keep])
    v_cat = np.column_stack([v_cols[i] for i in keep])
    return _polar(u_cat), sig, _polar(v_cat)


def _merge_tsv(deltas: list[np.ndarray], ranks: list[int], lam: float) -> np.ndarray:
    u_perp, sig, v_perp = tsv_bases(deltas, ranks)
    return lam * (u_perp * sig) @ v_perp.T


# ---------------------------------------------------------------- knots


def _merge_knots(units: list[UnitUpdate], keep: list[bool], params: MergeParams) -> np.ndarray:
    deltas = [u.delta for u in units]
    d_in = deltas[0].shape[1]
    u_mat, s, vh = np.linalg.svd(np.hstack(deltas), full_matrices=False)
    v_cat = vh.T
    kept = [i for i, flag in enumerate(keep) if flag]
    v_blocks = [v_cat[i * d_in : (i + 1) * d_in, :] for i in kept]
    v_merged = _inner_merge(
        v_blocks,
        [units[i].task_index for i in kept],
        [units[i].rank for i in kept],
        params,
    )
    return params.lam * (u_mat * s) @ v_merged.T


# ---------------------------------------------------------------- corespace


def corespace_bases(
    factor_pairs: list[tuple[np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray]:
    """Shared bases: left singular vectors of the concatenated B factors and
    right singular vectors of the stacked A factors. They span every task's
    column/row space, so projecting a task update into the core space and
    back reconstructs it exactly."""
    b_cat = np.hstack([b for b, _ in factor_pairs])
    a_cat = np.vstack([a for _, a in factor_pairs])
    u_ref = np.linalg.svd(b_cat, full_matrices=False)[0]
    v_ref = np.linalg.svd(a_cat, full_matrices=False)[2].T
    return u_ref, v_ref


def _merge_corespace(units: list[UnitUpdate], keep: list[bool], params: MergeParams) -> np.ndarray:
    missing = [u.task_index for u in units if u.factors is None]
    if missing:
        raise UnsupportedMethodError(
            "corespace needs the raw low-rank factors, but only dense deltas are "
            f"available for task indices {missing}"
        )
    u_ref, v_ref = corespace_bases([u.factors for u in units])
    kept = [i for i, flag in enumerate(keep) if flag]
    cores = [u_ref.T @ units[i].delta @ v_ref for i in kept]
    core = _inner_merge(
        cores, [units[i].task_index for i in kept], [units[i].rank for i in kept], params
    )
    return params.lam * u_ref @ core @ v_ref.T


# ---------------------------------------------------------------- dispatch


def _inner_merge(
    mats: list[np.ndarray], task_indices: list[int], ranks: list[int], params: MergeParams
) -> np.ndarray:
    """Merge used inside knots/corespace, always at unit scale."""
    inner = replace(params, method=params.inner, lam=1.0)
    if inner.method == "ta":
        return np.sum(mats, axis=0)
    if inner.method == "ties":
        return _merge_ties(mats, 1.0, inner.density)
    if inner.method == "dare":
        return _merge_dare(mats, task_indices, inner)
    return _merge_tsv(mats, _effective_ranks(inner, ranks), 1.0)


def _effective_ranks(params: MergeParams, ranks: list[int]) -> list[int]:
    return [params.rank] * len(ranks) if params.rank is not None else list(ranks)


def merge_units(
    units: list[UnitUpdate],
    params: MergeParams,
    shape: tuple[int, int],
    retained: list[bool] | None = None,
) -> np.ndarray:
    """Merges the retained units for one (layer, projection) slot.

    units holds every task's update for the slot; retained marks survivors
    (None keeps all). Subspace methods consult params.order to decide
    whether pruned units still contribute to basis construction.
    """
    if retained is None:
        retained = [True] * len(units)
    kept = [u for u, flag in zip(units, retained) if flag]
    if not kept:
        return np.zeros(shape, dtype=np.float64)

    if params.method == "ta":
        return _merge_ta([u.delta for u in kept], params.lam)
    if params.method == "ties":
        return _merge_ties([u.delta for u in kept], params.lam, params.density)
    if params.method == "dare":
        return _merge_dare([u.delta for u in kept], [u.task_index for u in kept], params)
    if params.method == "tsv":
        return _merge_tsv(
            [u.delta for u in kept], _effective_ranks(params, [u.rank for u in kept]), params.lam
        )

    if params.order == "prune_then_align":
        base_units, flags = kept, [True] * len(kept)
    else:
        base_units, flags = units, retained
    if params.method == "knots":
        return _merge_knots(base_units, flags, params)
    return _merge_corespace(base_units, flags, params)


@dataclass
class MergedDelta:
    """Merged dense updates keyed (layer, projection), plus the recipe that made them."""

    entries: dict[tuple[int, str], np.ndarray]
    tasks: list[str]
    num_layers: int
    projections: tuple[str, ...]
    params: MergeParams
    mask: PruningMask = field(repr=False, default=None)

    def manifest(self) -> dict[str, object]:
        mask_payload = None
        if self.mask is not None:
            mask_payload = {
                "L": self.mask.num_layers,
                "T": self.mask.num_tasks,
                "tasks": self.mask.tasks,
                "rows": ["".join(str(int(b)) for b in row) for row in self.mask.bits],
            }
        return {
            "method": self.params.method,
            "lambda": self.params.lam,
            "density": self.params.density,
            "drop_rate": self.params.drop_rate,
            "inner": self.params.inner,
            "order": self.params.order,
            "rank": self.params.rank,
            "seed": self.params.seed,
            "tasks": self.tasks,
            "mask": mask_payload,
        }


def merge_with_mask(grid: ModuleGrid, mask: PruningMask, params: MergeParams) -> MergedDelta:
    """Applies the pruning mask and merges every (layer, projection) slot.

    A unit is indivisible: bit (l, t) removes task t's q, k, v and o updates
    at layer l together. The zero mask reproduces the unmasked merge through
    the identical code path.
    """
    if mask.bits.shape != (grid.num_layers, grid.num_tasks):
        raise ShapeMismatchError(
            f"mask shape {mask.bits.shape} does not fit grid "
            f"({grid.num_layers} layers x {grid.num_tasks} tasks)"
        )
    if mask.tasks != grid.tasks:
        raise ShapeMismatchError(
            f"mask task names {mask.tasks} do not match grid tasks {grid.tasks}"
        )
    entries: dict[tuple[int, str], np.ndarray] = {}
    for layer in range(grid.num_layers):
        retained = [not bool(mask.bits[layer, t]) for t in range(grid.num_tasks)]
        for proj in grid.projections:
            units = [
                UnitUpdate(
                    delta=grid.unit_delta(layer, t, proj),
                    task_index=t,
                    rank=grid.checkpoints[t].rank,
                    factors=grid.unit_factors(layer, t, proj),
                )
                for t in range(grid.num_tasks)
            ]
            entries[(layer, proj)] = merge_units(
                units, params, units[0].delta.shape, retained
            )
    return MergedDelta(
        entries=entries,
        tasks=list(grid.tasks),
        num_layers=grid.num_layers,
        projections=grid.projections,
        params=params,
        mask=mask,
    )
