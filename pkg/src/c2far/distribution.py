"""The coarse-to-fine output distribution over the real line.

Per-level categoricals pick a leaf interval; a final continuous density
places the value inside it.  Finite leaves are uniform.  The two open-ended
extreme leaves carry Type I Pareto tails whose scale is fixed by the binning
extent: for the top leaf with finite edge ``a``, ``x - a + extent_hi`` is
Pareto(scale=extent_hi, shape=alpha_hi); the bottom leaf with edge ``b`` is
the mirror image, ``b - x + |extent_lo|`` ~ Pareto(|extent_lo|, alpha_lo).
When the leaf edge coincides with the extent boundary this is the plain
Type I Pareto anchored at the boundary.

Conditionals are supplied as a callable ``prefix -> probability vector`` so
the distribution only ever manifests the branches it needs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .binning import BinningSpec, BinPath, discretize, leaf_index, leaf_to_paths, paths_to_leaf
from .exceptions import ConfigurationError, InputError

Conditionals = Callable[[BinPath], np.ndarray]
Tails = tuple[float, float]


@dataclass
class StepDensity:
    """Prefix-independent per-level probabilities plus tail shapes.

    Usable directly as a conditionals provider.
    """

    level_probs: list[np.ndarray]
    alpha_hi: float
    alpha_lo: float

    def __post_init__(self):
        self.level_probs = [np.asarray(p, dtype=np.float64) for p in self.level_probs]
        for p in self.level_probs:
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
                raise InputError("level probabilities must be non-negative and sum to 1")
        if not (self.alpha_hi > 0 and self.alpha_lo > 0):
            raise InputError("tail shapes must be positive")

    def __call__(self, prefix: BinPath) -> np.ndarray:
        return self.level_probs[len(prefix)]

    @property
    def tails(self) -> Tails:
        return (self.alpha_hi, self.alpha_lo)


def _tail_scales(spec: BinningSpec) -> tuple[float, float]:
    if not (spec.extent_lo < 0.0 < spec.extent_hi):
        raise ConfigurationError("Pareto tails need extent_lo < 0 < extent_hi")
    return spec.extent_hi, -spec.extent_lo


def _memo(conditionals: Conditionals) -> Conditionals:
    cache: dict = {}

    def get(prefix):
        prefix = tuple(int(z) for z in prefix)
        if prefix not in cache:
            cache[prefix] = np.asarray(conditionals(prefix), dtype=np.float64)
        return cache[prefix]

    return get


# -- level B+1 (within-leaf) densities, vectorized over leaves ---------------


def leaf_log_density(spec: BinningSpec, leaves, values, alpha_hi, alpha_lo) -> np.ndarray:
    """Log-density of ``values`` given they fell in ``leaves``."""
    s_hi, s_lo = _tail_scales(spec)
    leaves = np.asarray(leaves, dtype=np.int64)
    x = np.asarray(values, dtype=np.float64)
    a_hi = np.broadcast_to(np.asarray(alpha_hi, dtype=np.float64), x.shape)
    a_lo = np.broadcast_to(np.asarray(alpha_lo, dtype=np.float64), x.shape)
    edges = spec.leaf_edges
    n = spec.n_intervals
    lo, hi = edges[leaves], edges[leaves + 1]
    out = -np.log(hi - lo)
    top = leaves == n - 1
    bot = leaves == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        y = x[top] - edges[n - 1] + s_hi
        out[top] = np.where(
            y >= s_hi, np.log(a_hi[top]) + a_hi[top] * np.log(s_hi) - (a_hi[top] + 1) * np.log(y), -np.inf
        )
        y = edges[1] - x[bot] + s_lo
        out[bot] = np.where(
            y > s_lo, np.log(a_lo[bot]) + a_lo[bot] * np.log(s_lo) - (a_lo[bot] + 1) * np.log(y), -np.inf
        )
    return out


def leaf_cdf(spec: BinningSpec, leaf: int, value: float, alpha_hi: float, alpha_lo: float) -> float:
    """P(Z <= value | Z in leaf)."""
    s_hi, s_lo = _tail_scales(spec)
    edges = spec.leaf_edges
    n = spec.n_intervals
    if leaf == n - 1:
        if value < edges[n - 1]:
            return 0.0
        return 1.0 - (s_hi / (value - edges[n - 1] + s_hi)) ** alpha_hi
    if leaf == 0:
        if value >= edges[1]:
            return 1.0
        return (s_lo / (edges[1] - value + s_lo)) ** alpha_lo
    lo, hi = edges[leaf], edges[leaf + 1]
    return float(min(max((value - lo) / (hi - lo), 0.0), 1.0))


def sample_in_leaf(spec: BinningSpec, leaves, u, alpha_hi, alpha_lo) -> np.ndarray:
    """Inverse-CDF draw inside each leaf from uniforms ``u`` in [0, 1)."""
    s_hi, s_lo = _tail_scales(spec)
    leaves = np.asarray(leaves, dtype=np.int64)
    u = np.asarray(u, dtype=np.float64)
    a_hi = np.broadcast_to(np.asarray(alpha_hi, dtype=np.float64), u.shape)
    a_lo = np.broadcast_to(np.asarray(alpha_lo, dtype=np.float64), u.shape)
    edges = spec.leaf_edges
    n = spec.n_intervals
    lo, hi = edges[leaves], edges[leaves + 1]
    out = lo + u * (hi - lo)
    # rounding can land exactly on the upper edge; keep the value in its leaf
    over = out >= hi
    out[over] = np.nextafter(hi[over], -np.inf)
    top = leaves == n - 1
    bot = leaves == 0
    # 1 - u is in (0, 1], so the Pareto draws are finite
    v = 1.0 - u
    with np.errstate(over="ignore"):
        out[top] = edges[n - 1] + s_hi * (v[top] ** (-1.0 / a_hi[top]) - 1.0)
        out[bot] = edges[1] - s_lo * (v[bot] ** (-1.0 / a_lo[bot]) - 1.0)
    out[bot] = np.minimum(out[bot], np.nextafter(edges[1], -np.inf))
    # tiny shapes overflow the power; saturate at the largest finite double
    big = np.finfo(np.float64).max
    return np.clip(out, -big, big)


# -- public single-step operations -------------------------------------------


def log_prob(spec: BinningSpec, conditionals: Conditionals, tails: Tails, value: float) -> float:
    """Exact log-density of ``value``; ``-inf`` when the realized path has zero probability."""
    if not math.isfinite(value):
        raise InputError(f"non-finite value {value!r}")
    path = discretize(spec, value)
    total = 0.0
    for i, z in enumerate(path):
        p = float(np.asarray(conditionals(path[:i]))[z])
        if p <= 0.0:
            return -math.inf
        total += math.log(p)
    leaf = int(paths_to_leaf(spec, path))
    total += float(leaf_log_density(spec, [leaf], [value], tails[0], tails[1])[0])
    return total


def sample(
    spec: BinningSpec, conditionals: Conditionals, tails: Tails, rng: np.random.Generator
) -> tuple[BinPath, float]:
    path: list[int] = []
    for i in range(spec.n_levels):
        p = np.asarray(conditionals(tuple(path)), dtype=np.float64)
        path.append(int(rng.choice(len(p), p=p / p.sum())))
    leaf = int(paths_to_leaf(spec, path))
    value = float(sample_in_leaf(spec, [leaf], [rng.random()], tails[0], tails[1])[0])
    return tuple(path), value


def sample_n(
    spec: BinningSpec, conditionals: Conditionals, tails: Tails, rng: np.random.Generator, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``size`` independent (path, value) pairs, level by level."""
    cond = _memo(conditionals)
    paths = np.zeros((size, spec.n_levels), dtype=np.int64)
    for i in range(spec.n_levels):
        if i == 0:
            groups = {(): np.arange(size)}
        else:
            keys = paths[:, :i]
            uniq, inv = np.unique(keys, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            groups = {tuple(int(z) for z in uniq[g]): np.flatnonzero(inv == g) for g in range(len(uniq))}
        for prefix, rows in groups.items():
            p = cond(prefix)
            cum = np.cumsum(p / p.sum())
            idx = np.searchsorted(cum, rng.random(len(rows)), side="right")
            paths[rows, i] = np.minimum(idx, len(p) - 1)
    leaves = paths_to_leaf(spec, paths)
    values = sample_in_leaf(spec, leaves, rng.random(size), tails[0], tails[1])
    return paths, values


def cdf(spec: BinningSpec, conditionals: Conditionals, tails: Tails, value: float) -> float:
    """P(Z <= value): whole sub-bins below ``value`` plus the partial containing leaf."""
    if math.isnan(value):
        raise InputError("cdf of NaN")
    if value == math.inf:
        return 1.0
    if value == -math.inf:
        return 0.0
    path = discretize(spec, value)
    below = 0.0
    mass = 1.0
    for i, z in enumerate(path):
        p = np.asarray(conditionals(path[:i]), dtype=np.float64)
        below += mass * float(p[:z].sum())
        mass *= float(p[z])
    leaf = int(paths_to_leaf(spec, path))
    return float(min(1.0, below + mass * leaf_cdf(spec, leaf, value, tails[0], tails[1])))


def leaf_probabilities(spec: BinningSpec, conditionals: Conditionals) -> np.ndarray:
    """Probability of every leaf (manifests the whole tree; small binnings only)."""
    cond = _memo(conditionals)
    probs = np.ones(1)
    for i in range(spec.n_levels):
        prefixes = leaf_to_paths(BinningSpec(spec.levels[:i], spec.extent_lo, spec.extent_hi), np.arange(len(probs))) if i else [()]
        rows = [cond(tuple(int(z) for z in pre)) for pre in prefixes]
        probs = (probs[:, None] * np.stack(rows)).reshape(-1)
    return probs


def pdf_grid(spec: BinningSpec, conditionals: Conditionals, tails: Tails, grid: Sequence[float]) -> np.ndarray:
    """Density at each point of a strictly increasing grid."""
    x = np.asarray(grid, dtype=np.float64)
    if x.ndim != 1 or (len(x) > 1 and np.any(np.diff(x) <= 0)):
        raise InputError("grid must be a strictly increasing 1-d sequence")
    cond = _memo(conditionals)
    leaves = leaf_index(spec, x)
    paths = leaf_to_paths(spec, leaves)
    logp = np.zeros(len(x))
    for i in range(spec.n_levels):
        for row, path in enumerate(paths):
            logp[row] += _safe_log(cond(tuple(path[:i]))[path[i]])
    logp += leaf_log_density(spec, leaves, x, tails[0], tails[1])
    return np.exp(logp)


def cdf_grid(spec: BinningSpec, conditionals: Conditionals, tails: Tails, grid: Sequence[float]) -> np.ndarray:
    cond = _memo(conditionals)
    return np.array([cdf(spec, cond, tails, float(v)) for v in grid])


def _safe_log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf
