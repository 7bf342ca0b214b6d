"""Scan-path process over image regions and its aggregate gaze-time algebra.

The generative story implemented here:

1. An image is tiled into N regions, each summarized by a K-dim feature
   vector.  A viewer's scan-path is a random sequence of region fixations
   (F_t), t = 1..T, drawn from a first-order transition kernel.
2. Inhibition of return (IoR): regions already fixated get probability
   zero (infinite horizon) or the last ``ior_horizon`` of them do (finite
   horizon).  The remaining affinities are renormalized at every step.
3. Each fixation contributes a log-duration mu(S_j); the initial "gist"
   fixation contributes mu0.  Total log gaze time is the sum, so the
   expected log gaze over all scan-paths of length T is

       gist + sum_over_paths P(path) * sum_over_visits mu(S_j)

   which, because IoR makes visits within a path distinct, rearranges to

       gist + sum_j mu(S_j) * w_j,     w_j = P(region j is ever visited).

Three routes to the same quantities are provided and cross-checked in the
test suite: explicit path enumeration (the oracle, small N only), an exact
tensor recursion over visit marginals (scales to the synthetic-data grids),
and Monte-Carlo simulation (any size).

Region indices are 0-based and map row-major onto the grid.  Probability
arithmetic is plain float64; path probabilities are formed as products,
which is ample at the enumerable sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AllMasked, DimensionMismatch, ExplosionGuard

DEFAULT_PATH_CAP = 10_000_000
DEFAULT_TABLE_CAP = 20_000_000


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GazeField:
    """State space: a rows x cols grid of regions with feature vectors.

    ``features`` has shape (N, K) with N = rows * cols; row-major region
    order (region j sits at grid cell (j // cols, j % cols)).
    """

    rows: int
    cols: int
    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", feats)
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dimensions must be positive")
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D (N, K) array")
        if feats.shape[0] != self.rows * self.cols:
            raise DimensionMismatch(
                f"features rows {feats.shape[0]} != rows*cols {self.rows * self.cols}"
            )

    @property
    def num_regions(self) -> int:
        return self.rows * self.cols

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class TransitionKernel:
    """Base region-to-region affinities plus the IoR masking rule.

    ``base_affinity[i, j]`` is a nonnegative score for moving from region
    i to region j before masking; each step's distribution is the current
    row with masked entries zeroed and the rest renormalized.
    ``initial_dist`` is the distribution of the first fixation.
    ``ior_horizon`` is None for infinite-horizon IoR (no region is ever
    revisited) or a positive int h (only the h most recent fixations are
    masked, so cycles become possible).
    """

    base_affinity: np.ndarray
    initial_dist: np.ndarray
    ior_horizon: int | None = None

    def __post_init__(self):
        aff = np.asarray(self.base_affinity, dtype=np.float64)
        pi = np.asarray(self.initial_dist, dtype=np.float64)
        object.__setattr__(self, "base_affinity", aff)
        object.__setattr__(self, "initial_dist", pi)
        if aff.ndim != 2 or aff.shape[0] != aff.shape[1]:
            raise DimensionMismatch(f"base_affinity must be square, got {aff.shape}")
        if pi.shape != (aff.shape[0],):
            raise DimensionMismatch(
                f"initial_dist length {pi.shape} incompatible with affinity {aff.shape}"
            )
        if np.any(aff < 0):
            raise ValueError("affinities must be nonnegative")
        if np.any(pi < 0):
            raise ValueError("initial distribution must be nonnegative")
        if abs(float(pi.sum()) - 1.0) > 1e-12:
            raise ValueError(f"initial distribution sums to {pi.sum()!r}, not 1")
        if self.ior_horizon is not None and self.ior_horizon < 1:
            raise ValueError("ior_horizon must be None (infinite) or >= 1")

    @property
    def size(self) -> int:
        return self.base_affinity.shape[0]

    @property
    def infinite_horizon(self) -> bool:
        return self.ior_horizon is None


@dataclass(frozen=True)
class ScanPath:
    """An ordered sequence of fixated regions with its path probability."""

    fixations: tuple[int, ...]
    prob: float

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0 + 1e-12:
            raise ValueError(f"path probability {self.prob} outside [0, 1]")


@dataclass(frozen=True)
class DurationModel:
    """Log-fixation-duration functions and the sampling-noise spec.

    ``mu0(gist_features, context_features_or_None)`` gives the initial
    gist log-duration; ``mu(region_features)`` the per-region one.  Both
    must be deterministic.  ``noise_sigma`` is the std-dev of additive
    Gaussian noise on total log gaze used when *sampling* observations
    (so durations are lognormal in seconds); the expectation operators
    below never apply it.
    """

    mu0: Callable[[np.ndarray, np.ndarray | None], float]
    mu: Callable[[np.ndarray], float]
    noise_sigma: float = 0.0

    def mu_values(self, gaze_field: GazeField) -> np.ndarray:
        """Evaluate mu on every region of a field, as a length-N vector."""
        return np.array(
            [float(self.mu(gaze_field.features[j])) for j in range(gaze_field.num_regions)]
        )


@dataclass(frozen=True)
class WeightMap:
    """Per-region visit weights w and their normalized pattern p.

    ``weights[j]`` is the total probability of scan-paths that visit
    region j (so each entry lies in [0, 1]); ``pattern`` is weights
    normalized to sum 1 (all zeros if every weight is zero).
    """

    weights: np.ndarray
    pattern: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        p = np.asarray(self.pattern, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "pattern", p)
        if w.shape != p.shape or w.ndim != 1:
            raise DimensionMismatch(f"weights {w.shape} vs pattern {p.shape}")
        if np.any(w > 0) and abs(float(p.sum()) - 1.0) > 1e-12:
            raise ValueError(f"pattern sums to {p.sum()!r}, not 1")

    @classmethod
    def from_weights(cls, weights: np.ndarray) -> "WeightMap":
        w = np.asarray(weights, dtype=np.float64)
        total = float(w.sum())
        pattern = w / total if total > 0 else np.zeros_like(w)
        return cls(weights=w, pattern=pattern)


# ---------------------------------------------------------------------------
# Single-step transition
# ---------------------------------------------------------------------------


def step_distribution(
    kernel: TransitionKernel, visited: Iterable[int], current: int
) -> np.ndarray:
    """Next-fixation distribution from ``current`` given the visit history.

    ``current`` is appended to the history internally, so callers pass the
    fixations *before* the current one.  Under a finite IoR horizon h only
    the last h entries of the (ordered) history are masked; for infinite
    horizon the order of ``visited`` is irrelevant.

    Returns a length-N probability vector with masked entries exactly 0.
    Raises AllMasked when no candidate has positive affinity, which the
    caller must treat as path termination.
    """
    history = list(visited) + [current]
    if kernel.infinite_horizon:
        masked = set(history)
    else:
        masked = set(history[-kernel.ior_horizon :])
    row = kernel.base_affinity[current].copy()
    row[list(masked)] = 0.0
    total = float(row.sum())
    if total <= 0.0:
        raise AllMasked(f"no unmasked candidate from region {current}")
    return row / total


# ---------------------------------------------------------------------------
# Exact enumeration (the oracle)
# ---------------------------------------------------------------------------


def _permutation_count(n: int, length: int) -> int:
    count = 1
    for i in range(length):
        count *= n - i
    return count


def enumerate_scanpaths(
    gaze_field: GazeField,
    kernel: TransitionKernel,
    n_fixations: int,
    max_paths: int = DEFAULT_PATH_CAP,
) -> list[ScanPath]:
    """Every scan-path of effective length min(n_fixations, N), with its
    probability; the probabilities sum to 1.

    Infinite-horizon IoR only: with a finite horizon the path set is not
    finite, so that regime is sampling-only.  If a branch dead-ends (all
    remaining affinity masked away) the truncated path is emitted with the
    prefix probability, preserving total mass.

    Raises ExplosionGuard when N!/(N-L)! exceeds ``max_paths``.
    """
    if n_fixations < 1:
        raise ValueError("n_fixations must be >= 1")
    if not kernel.infinite_horizon:
        raise ValueError("enumeration requires infinite-horizon IoR")
    n = kernel.size
    if gaze_field.num_regions != n:
        raise DimensionMismatch(
            f"field has {gaze_field.num_regions} regions, kernel {n}"
        )
    length = min(n_fixations, n)
    count = _permutation_count(n, length)
    if count > max_paths:
        raise ExplosionGuard(
            f"{count} paths exceed the cap of {max_paths}; "
            "use occupancy_weights or Monte-Carlo instead"
        )

    paths: list[ScanPath] = []
    prefix: list[int] = []

    def extend(prob: float):
        if len(prefix) == length:
            paths.append(ScanPath(tuple(prefix), prob))
            return
        if not prefix:
            for j in range(n):
                prefix.append(j)
                extend(prob * float(kernel.initial_dist[j]))
                prefix.pop()
            return
        try:
            step = step_distribution(kernel, prefix[:-1], prefix[-1])
        except AllMasked:
            paths.append(ScanPath(tuple(prefix), prob))
            return
        for j in range(n):
            if step[j] == 0.0:
                continue
            prefix.append(j)
            extend(prob * float(step[j]))
            prefix.pop()

    extend(1.0)
    return paths


def expected_log_gaze_pathsum(
    gaze_field: GazeField,
    kernel: TransitionKernel,
    durations: DurationModel,
    n_fixations: int,
    gist_log_duration: float,
    max_paths: int = DEFAULT_PATH_CAP,
) -> float:
    """Expected log gaze by explicit path enumeration.

    Returns gist_log_duration + sum_paths P(path) * sum_visits mu(S_j).
    This is the slow, obviously-correct route; ``expected_log_gaze_weighted``
    must agree with it to ~1e-10 on any enumerable instance.
    """
    mu = durations.mu_values(gaze_field)
    paths = enumerate_scanpaths(gaze_field, kernel, n_fixations, max_paths)
    local = 0.0
    for path in paths:
        local += path.prob * float(sum(mu[j] for j in path.fixations))
    return gist_log_duration + local


def enumerate_weights(
    gaze_field: GazeField,
    kernel: TransitionKernel,
    n_fixations: int,
    max_paths: int = DEFAULT_PATH_CAP,
) -> WeightMap:
    """Per-region visit weights w_j = sum of P(path) over paths visiting j,
    by explicit enumeration."""
    paths = enumerate_scanpaths(gaze_field, kernel, n_fixations, max_paths)
    w = np.zeros(kernel.size)
    for path in paths:
        for j in set(path.fixations):
            w[j] += path.prob
    return WeightMap.from_weights(w)


def expected_log_gaze_weighted(
    gaze_field: GazeField,
    durations: DurationModel,
    weights: WeightMap,
    gist_log_duration: float,
) -> float:
    """Expected log gaze from visit weights: gist + sum_j mu(S_j) * w_j."""
    if weights.weights.shape[0] != gaze_field.num_regions:
        raise DimensionMismatch(
            f"{weights.weights.shape[0]} weights for {gaze_field.num_regions} regions"
        )
    mu = durations.mu_values(gaze_field)
    return gist_log_duration + float(mu @ weights.weights)


# ---------------------------------------------------------------------------
# Exact visit marginals without enumeration
# ---------------------------------------------------------------------------


def occupancy_weights(
    gaze_field: GazeField,
    kernel: TransitionKernel,
    n_fixations: int,
    max_table: int = DEFAULT_TABLE_CAP,
) -> WeightMap:
    """Exact visit weights via step-by-step visit marginals.

    Under infinite-horizon IoR a path visits each region at most once, so
    w_j = sum_t P(F_t = j).  The marginals are computed from a tensor over
    ordered prefixes (the renormalizing denominator depends on the whole
    visited set), which needs N^(L-1) table entries instead of the
    N!/(N-L)! paths of full enumeration.  Agrees with enumerate_weights
    to float precision wherever both run; used for ground truth on grids
    where enumeration explodes (e.g. N=64, L=4).

    Raises ExplosionGuard when the table would exceed ``max_table`` entries.
    Branches whose affinity mass is entirely masked terminate, matching
    the truncation convention of the enumeration route.
    """
    if n_fixations < 1:
        raise ValueError("n_fixations must be >= 1")
    if not kernel.infinite_horizon:
        raise ValueError("exact marginals require infinite-horizon IoR")
    n = kernel.size
    if gaze_field.num_regions != n:
        raise DimensionMismatch(
            f"field has {gaze_field.num_regions} regions, kernel {n}"
        )
    length = min(n_fixations, n)
    if length > 1 and n ** (length - 1) > max_table:
        raise ExplosionGuard(
            f"prefix table of {n ** (length - 1)} entries exceeds cap {max_table}"
        )

    affinity = kernel.base_affinity
    affinity_t = np.ascontiguousarray(affinity.T)
    row_sums = affinity.sum(axis=1)
    self_affinity = np.diag(affinity).copy()

    weights = kernel.initial_dist.copy()
    prefix_prob = kernel.initial_dist.copy()  # shape (N,)*t after step t

    for t in range(2, length + 1):
        ndim = t - 1  # prefix length so far
        # Denominator per prefix: total affinity from the last fixation
        # minus affinity toward every already-visited region (incl. itself).
        denom = row_sums.reshape((1,) * (ndim - 1) + (n,)) - self_affinity.reshape(
            (1,) * (ndim - 1) + (n,)
        )
        for k in range(ndim - 1):
            shape = [1] * ndim
            shape[k] = n
            shape[-1] = n
            denom = denom - affinity_t.reshape(shape)
        ratio = np.where(
            (prefix_prob > 0) & (denom > 0),
            prefix_prob / np.where(denom > 0, denom, 1.0),
            0.0,
        )

        if t < length:
            nxt = ratio[..., None] * affinity.reshape((1,) * (ndim - 1) + (n, n))
            idx = np.arange(n)
            for k in range(ndim):
                view = np.moveaxis(nxt, (k, ndim), (0, 1))
                view[idx, idx] = 0.0
            prefix_prob = nxt
            weights = weights + nxt.sum(axis=tuple(range(ndim)))
        else:
            # Final step: contract instead of materializing the N^L tensor.
            ratio_last = ratio.sum(axis=tuple(range(ndim - 1)))  # (N,) by last
            marginal = ratio_last @ affinity
            for k in range(ndim - 1):
                axes = tuple(a for a in range(ndim) if a not in (k, ndim - 1))
                pair = ratio.sum(axis=axes)  # (N_k, N_last)
                marginal = marginal - np.einsum("jl,lj->j", pair, affinity)
            marginal = marginal - ratio_last * self_affinity
            weights = weights + marginal

    return WeightMap.from_weights(weights)


# ---------------------------------------------------------------------------
# Monte-Carlo simulation
# ---------------------------------------------------------------------------


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> int:
    # One uniform draw against the CDF; bit-reproducible given the rng state.
    edges = np.cumsum(probs)
    j = int(np.searchsorted(edges, rng.random(), side="right"))
    return min(j, probs.shape[0] - 1)


def _sample_path(
    kernel: TransitionKernel, n_fixations: int, rng: np.random.Generator
) -> ScanPath:
    n = kernel.size
    length = min(n_fixations, n) if kernel.infinite_horizon else n_fixations
    first = _categorical(rng, kernel.initial_dist)
    fixations = [first]
    prob = float(kernel.initial_dist[first])
    while len(fixations) < length:
        try:
            step = step_distribution(kernel, fixations[:-1], fixations[-1])
        except AllMasked:
            break
        j = _categorical(rng, step)
        fixations.append(j)
        prob *= float(step[j])
    return ScanPath(tuple(fixations), prob)


def sample_scanpath(
    gaze_field: GazeField,
    kernel: TransitionKernel,
    n_fixations: int,
    rng_seed: int,
) -> ScanPath:
    """One scan-path drawn from the generative process; deterministic in
    ``rng_seed``.  Terminates early if every candidate becomes masked."""
    if n_fixations < 1:
        raise ValueError("n_fixations must be >= 1")
    if gaze_field.num_regions != kernel.size:
        raise DimensionMismatch(
            f"field has {gaze_field.num_regions} regions, kernel {kernel.size}"
        )
    rng = np.random.default_rng(rng_seed)
    return _sample_path(kernel, n_fixations, rng)


def monte_carlo_log_gaze(
    gaze_field: GazeField,
    kernel: TransitionKernel,
    durations: DurationModel,
    n_fixations: int,
    n_samples: int,
    rng_seed: int,
    gist_log_duration: float,
) -> tuple[float, float]:
    """Sampled estimate of the expected log gaze.

    Returns (mean, standard error) of gist + sum_visits mu over
    ``n_samples`` independent scan-paths.  The standard error is 0.0 for a
    single sample.  Reproducible given the seed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mu = durations.mu_values(gaze_field)
    rng = np.random.default_rng(rng_seed)
    totals = np.empty(n_samples)
    for i in range(n_samples):
        path = _sample_path(kernel, n_fixations, rng)
        totals[i] = gist_log_duration + float(sum(mu[j] for j in path.fixations))
    mean = float(totals.mean())
    if n_samples == 1:
        return mean, 0.0
    std_error = float(totals.std(ddof=1) / math.sqrt(n_samples))
    return mean, std_error


def gaze_seconds(expected_log_gaze: float) -> float:
    """Aggregate gaze time in seconds: exp of the expected log gaze."""
    if not math.isfinite(expected_log_gaze):
        raise ValueError(f"expected log gaze must be finite, got {expected_log_gaze}")
    return math.exp(expected_log_gaze)
