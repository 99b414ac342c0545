"""Hierarchical coarse-to-fine binning of the real line.

A binning splits ``[extent_lo, extent_hi]`` evenly into ``levels[0]`` coarse
bins, splits each of those evenly into ``levels[1]`` finer bins, and so on.
A value is represented by its *bin path*, one index per level.  The two
fully-extreme leaves (all-lowest and all-highest paths) are open-ended and
extend to -inf / +inf respectively.

Intervals are half-open, ``[lo, hi)``.  All edges are computed directly as
``extent_lo + span * (k / n)`` from integer leaf coordinates so that a coarse
edge and the finer edges that coincide with it are bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, InputError

BinPath = tuple[int, ...]


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    lo_open_ended: bool = False
    hi_open_ended: bool = False

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, value: float) -> bool:
        return self.lo <= value < self.hi


@dataclass(frozen=True)
class BinningSpec:
    levels: tuple[int, ...]
    extent_lo: float
    extent_hi: float

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def n_intervals(self) -> int:
        return math.prod(self.levels)

    @property
    def total_bins(self) -> int:
        return sum(self.levels)

    @property
    def span(self) -> float:
        return self.extent_hi - self.extent_lo

    @cached_property
    def radix(self) -> tuple[int, ...]:
        """Number of leaves under one bin at each level."""
        out = []
        for i in range(self.n_levels):
            out.append(math.prod(self.levels[i + 1:]))
        return tuple(out)

    @cached_property
    def leaf_edges(self) -> np.ndarray:
        n = self.n_intervals
        edges = self.extent_lo + self.span * (np.arange(n + 1, dtype=np.int64) / n)
        edges[0], edges[-1] = self.extent_lo, self.extent_hi
        return edges

    @cached_property
    def min_finite_width(self) -> float:
        return float(np.min(np.diff(self.leaf_edges)[1:-1])) if self.n_intervals > 2 else math.inf

    def edge(self, k: int, n: int) -> float:
        """Edge ``k`` of ``n`` evenly spaced composite bins."""
        if k == 0:
            return float(self.extent_lo)
        if k == n:
            return float(self.extent_hi)
        return self.extent_lo + self.span * (k / n)

    def to_dict(self) -> dict:
        return {"levels": list(self.levels), "extent_lo": self.extent_lo, "extent_hi": self.extent_hi}

    @classmethod
    def from_dict(cls, d: dict) -> "BinningSpec":
        return build_spec(d["levels"], d["extent_lo"], d["extent_hi"])


def build_spec(
    levels: Sequence[int], extent_lo: float, extent_hi: float, *, require_tails: bool = True
) -> BinningSpec:
    """Validate and construct a :class:`BinningSpec`.

    With ``require_tails`` (the default) the extent must straddle zero so
    that both Pareto tail scales are strictly positive.  Pure-geometry
    binnings (no density attached) may pass ``require_tails=False``.
    """
    levels = tuple(int(k) for k in levels)
    if len(levels) < 1:
        raise ConfigurationError("a binning needs at least one level")
    if any(k < 2 for k in levels):
        raise ConfigurationError(f"every level needs at least 2 bins, got {list(levels)}")
    lo, hi = float(extent_lo), float(extent_hi)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
        raise ConfigurationError(f"invalid extent [{lo}, {hi}]")
    if require_tails and not (lo < 0.0 < hi):
        raise ConfigurationError(f"extent must satisfy extent_lo < 0 < extent_hi, got [{lo}, {hi}]")
    return BinningSpec(levels, lo, hi)


def leaf_index(spec: BinningSpec, values) -> np.ndarray:
    """Flat (row-major) leaf index for each value; out-of-extent values clamp."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InputError("cannot discretize non-finite values")
    idx = np.searchsorted(spec.leaf_edges, v, side="right") - 1
    return np.clip(idx, 0, spec.n_intervals - 1)


def leaf_to_paths(spec: BinningSpec, leaves) -> np.ndarray:
    leaves = np.asarray(leaves, dtype=np.int64)
    out = np.empty(leaves.shape + (spec.n_levels,), dtype=np.int64)
    rem = leaves.copy()
    for i, r in enumerate(spec.radix):
        out[..., i] = rem // r
        rem = rem % r
    return out


def paths_to_leaf(spec: BinningSpec, paths) -> np.ndarray:
    paths = np.asarray(paths, dtype=np.int64)
    return (paths * np.asarray(spec.radix, dtype=np.int64)).sum(axis=-1)


def discretize_array(spec: BinningSpec, values) -> np.ndarray:
    """Vectorized :func:`discretize`: returns an integer array ``values.shape + (B,)``."""
    return leaf_to_paths(spec, leaf_index(spec, values))


def discretize(spec: BinningSpec, value: float) -> BinPath:
    if not math.isfinite(value):
        raise InputError(f"cannot discretize non-finite value {value!r}")
    return tuple(int(i) for i in discretize_array(spec, value))


def _check_path(spec: BinningSpec, path: Sequence[int], full: bool) -> None:
    if full and len(path) != spec.n_levels:
        raise InputError(f"path {tuple(path)} has {len(path)} indices, binning has {spec.n_levels} levels")
    for i, z in enumerate(path):
        if not 0 <= z < spec.levels[i]:
            raise InputError(f"index {z} out of range at level {i + 1} ({spec.levels[i]} bins)")


def interval_of(spec: BinningSpec, path: Sequence[int]) -> Interval:
    _check_path(spec, path, full=True)
    leaf = int(paths_to_leaf(spec, path))
    n = spec.n_intervals
    lo_open = leaf == 0
    hi_open = leaf == n - 1
    lo = -math.inf if lo_open else spec.edge(leaf, n)
    hi = math.inf if hi_open else spec.edge(leaf + 1, n)
    return Interval(lo, hi, lo_open, hi_open)


def child_edges(spec: BinningSpec, prefix: Sequence[int]) -> list[float]:
    """Edges of the level-``len(prefix)+1`` bins inside the bin picked by ``prefix``."""
    if len(prefix) >= spec.n_levels:
        raise InputError(f"prefix of length {len(prefix)} has no child level ({spec.n_levels} levels)")
    _check_path(spec, prefix, full=False)
    k = 0
    for i, z in enumerate(prefix):
        k = k * spec.levels[i] + int(z)
    n_parent = math.prod(spec.levels[: len(prefix)])
    n_child = spec.levels[len(prefix)]
    n = n_parent * n_child
    return [spec.edge(k * n_child + j, n) for j in range(n_child + 1)]


def finite_leaf_bounds(spec: BinningSpec, leaves) -> tuple[np.ndarray, np.ndarray]:
    """Finite ``[lo, hi)`` edges of the given leaves (extreme leaves report their extent-side edge)."""
    leaves = np.asarray(leaves, dtype=np.int64)
    edges = spec.leaf_edges
    return edges[leaves], edges[leaves + 1]
