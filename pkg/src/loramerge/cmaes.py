"""Covariance matrix adaptation evolution strategy, maximizing variant.

Implements the standard rank-mu update with cumulative step-size control:
the top half of each population is recombined with normalized log-rank
weights, two evolution paths accumulate mean shifts, and the covariance
gets the rank-one plus rank-mu update. Constants follow the usual defaults
for weights, c_sigma, c_c, c_1, c_mu and damping.

The caller owns the RNG: cma_ask draws exactly pop * dim normals from the
given generator, so trajectories are reproducible from the generator state
alone. Fitness is maximized and enters only through ranks (any strictly
increasing transform of the fitness leaves the update unchanged); NaN ranks
worst. Ranking ties keep candidate order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EIG_FLOOR = 1e-20


@dataclass
class CmaState:
    dim: int
    pop: int
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    ps: np.ndarray
    pc: np.ndarray
    gen: int
    # derived strategy constants
    mu: int
    weights: np.ndarray
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    chi_n: float

    @classmethod
    def from_dynamic(
        cls,
        *,
        dim: int,
        pop: int,
        mean: np.ndarray,
        sigma: float,
        cov: np.ndarray,
        ps: np.ndarray,
        pc: np.ndarray,
        gen: int,
    ) -> "CmaState":
        """Rebuilds a state (e.g. from a checkpoint): constants are derived,
        dynamic fields are taken as given."""
        state = cma_init(dim, mean, sigma if sigma > 0 else 1.0, pop)
        state.mean = np.asarray(mean, dtype=np.float64).copy()
        state.sigma = float(sigma)
        state.cov = np.asarray(cov, dtype=np.float64).copy()
        state.ps = np.asarray(ps, dtype=np.float64).copy()
        state.pc = np.asarray(pc, dtype=np.float64).copy()
        state.gen = int(gen)
        return state


def cma_init(dim: int, mean0: np.ndarray, sigma0: float, pop_size: int) -> CmaState:
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if pop_size < 2:
        raise ValueError(f"pop_size must be >= 2, got {pop_size}")
    if not sigma0 > 0:
        raise ValueError(f"sigma0 must be > 0, got {sigma0}")
    mean0 = np.asarray(mean0, dtype=np.float64)
    if mean0.shape != (dim,):
        raise ValueError(f"mean0 has shape {mean0.shape}, expected ({dim},)")

    mu = pop_size // 2
    raw = np.log(pop_size / 2 + 0.5) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mueff = 1.0 / float(np.sum(weights**2))
    n = float(dim)
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, np.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = np.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
    return CmaState(
        dim=dim,
        pop=pop_size,
        mean=mean0.copy(),
        sigma=float(sigma0),
        cov=np.eye(dim),
        ps=np.zeros(dim),
        pc=np.zeros(dim),
        gen=0,
        mu=mu,
        weights=weights,
        mueff=mueff,
        cc=cc,
        cs=cs,
        c1=c1,
        cmu=cmu,
        damps=damps,
        chi_n=chi_n,
    )


def _decompose(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition with the positive-definiteness floor applied."""
    evals, basis = np.linalg.eigh((cov + cov.T) / 2.0)
    return np.maximum(evals, _EIG_FLOOR), basis


def cma_ask(state: CmaState, rng: np.random.Generator) -> np.ndarray:
    """Samples pop candidates from N(mean, sigma^2 C)."""
    evals, basis = _decompose(state.cov)
    sqrt_cov = basis * np.sqrt(evals)
    xi = rng.standard_normal((state.pop, state.dim))
    return state.mean + state.sigma * xi @ sqrt_cov.T


def cma_tell(state: CmaState, samples: np.ndarray, fitnesses: np.ndarray) -> None:
    """Rank-based update, in place. Higher fitness is better."""
    samples = np.asarray(samples, dtype=np.float64)
    f = np.asarray(fitnesses, dtype=np.float64)
    if samples.shape != (state.pop, state.dim):
        raise ValueError(f"samples have shape {samples.shape}, expected {(state.pop, state.dim)}")
    if f.shape != (state.pop,):
        raise ValueError(f"fitnesses have shape {f.shape}, expected ({state.pop},)")

    keys = np.where(np.isnan(f), -np.inf, f)
    order = np.argsort(-keys, kind="stable")
    sel = samples[order[: state.mu]]

    evals, basis = _decompose(state.cov)
    inv_sqrt = (basis / np.sqrt(evals)) @ basis.T

    xold = state.mean
    state.mean = state.weights @ sel
    y = (state.mean - xold) / state.sigma

    cs, cc = state.cs, state.cc
    state.ps = (1 - cs) * state.ps + np.sqrt(cs * (2 - cs) * state.mueff) * (inv_sqrt @ y)
    state.gen += 1
    ps_norm = float(np.linalg.norm(state.ps))
    hsig = float(
        ps_norm / np.sqrt(1 - (1 - cs) ** (2 * state.gen)) / state.chi_n
        < 1.4 + 2 / (state.dim + 1)
    )
    state.pc = (1 - cc) * state.pc + hsig * np.sqrt(cc * (2 - cc) * state.mueff) * y

    artmp = (sel - xold) / state.sigma
    c1a = state.c1 * (1 - (1 - hsig**2) * cc * (2 - cc))
    cov = (
        (1 - c1a - state.cmu) * state.cov
        + state.c1 * np.outer(state.pc, state.pc)
        + state.cmu * (artmp.T * state.weights) @ artmp
    )
    state.cov = (cov + cov.T) / 2.0
    state.sigma *= float(
        np.exp(min(1.0, (cs / state.damps) * (ps_norm / state.chi_n - 1)))
    )
