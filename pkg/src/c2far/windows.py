"""Conditioning/prediction windows, min-max normalization, and forecast grids."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Series, SeriesView
from .exceptions import InputError, NormalizationError

logger = logging.getLogger(__name__)

QUANTILES = tuple(round(0.1 * k, 1) for k in range(1, 10))
EXTREME_QUANTILES = (0.005, 0.995)


@dataclass
class Scaler:
    lo: float
    hi: float

    def normalize(self, v):
        return (np.asarray(v, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def unnormalize(self, v):
        return np.asarray(v, dtype=np.float64) * (self.hi - self.lo) + self.lo


@dataclass
class SeriesWindow:
    series_id: str
    window_id: int
    start: int  # index of the first conditioning point in the series
    conditioning: np.ndarray  # (T,)
    prediction: np.ndarray | None  # (N,) or None at forecast time; may be shorter near series end
    covariates: np.ndarray  # (T+N, C)
    scaler: Scaler | None = None
    normalized: bool = False

    @property
    def T(self) -> int:
        return len(self.conditioning)

    @property
    def N(self) -> int:
        return len(self.covariates) - len(self.conditioning)


def make_windows(
    series: Sequence[Series | SeriesView],
    T: int,
    N: int,
    stride: int = 1,
    origins: str = "full",
    first_id: int = 0,
) -> list[SeriesWindow]:
    """Slice series into (T, N) windows, dropping constant conditioning ranges.

    ``origins="full"`` keeps windows lying entirely inside each series.
    ``origins="eval"`` (for :class:`SeriesView` inputs) keeps every stride-1
    origin whose prediction range touches the view's evaluation span, so each
    evaluation point is predicted once at every horizon; predictions past the
    series end are truncated.
    """
    if T < 1 or N < 0 or stride < 1:
        raise InputError("need T >= 1, N >= 0, stride >= 1")
    out: list[SeriesWindow] = []
    short = 0
    wid = first_id
    for s in series:
        if isinstance(s, SeriesView):
            base, values, eval_start = s.series, s.values, s.eval_start
        else:
            base, values, eval_start = s, s.values, 0
        n = len(values)
        if origins == "full":
            if n < T + N:
                short += 1
                continue
            starts = range(0, n - T - N + 1, stride)
        elif origins == "eval":
            first_origin = max(T, eval_start - N + 1)
            starts = range(first_origin - T, n - T, stride)
            if n < T + 1:
                short += 1
                continue
        else:
            raise InputError(f"unknown origins mode {origins!r}")
        cov = base.covariates(n + N)
        for s0 in starts:
            cond = values[s0 : s0 + T]
            if cond.max() == cond.min():
                continue
            out.append(
                SeriesWindow(
                    series_id=base.id,
                    window_id=wid,
                    start=s0,
                    conditioning=cond.copy(),
                    prediction=values[s0 + T : s0 + T + N].copy(),
                    covariates=cov[s0 : s0 + T + N].copy(),
                )
            )
            wid += 1
    if short:
        logger.warning("skipped %d series shorter than the window length", short)
    return out


def normalize_window(window: SeriesWindow) -> SeriesWindow:
    """Min-max scale a window by its conditioning range."""
    lo, hi = float(window.conditioning.min()), float(window.conditioning.max())
    if not hi > lo:
        raise NormalizationError(f"window {window.window_id} of {window.series_id} has a constant conditioning range")
    sc = Scaler(lo, hi)
    return replace(
        window,
        conditioning=sc.normalize(window.conditioning),
        prediction=None if window.prediction is None else sc.normalize(window.prediction),
        scaler=sc,
        normalized=True,
    )


def stack_windows(windows: Sequence[SeriesWindow]) -> tuple[np.ndarray, np.ndarray]:
    """(values (W, T+N), covariates (W, T+N, C)) for normalized, complete windows."""
    vals = np.stack([np.concatenate([w.conditioning, w.prediction]) for w in windows])
    cov = np.stack([w.covariates for w in windows])
    return vals, cov


@dataclass
class ForecastGrid:
    """Per-horizon forecast quantiles (rows: horizons, columns: quantile levels)."""

    quantiles: tuple[float, ...]
    values: np.ndarray  # (N, Q)
    n_rollouts: int
    samples: np.ndarray | None = field(default=None, repr=False)  # (R, N), unnormalized

    def quantile(self, q: float) -> np.ndarray:
        for j, level in enumerate(self.quantiles):
            if abs(level - q) < 1e-12:
                return self.values[:, j]
        raise InputError(f"quantile {q} not in forecast grid {self.quantiles}")

    @property
    def median(self) -> np.ndarray:
        return self.quantile(0.5)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_samples(cls, samples: np.ndarray, quantiles=QUANTILES, keep_samples: bool = False) -> "ForecastGrid":
        samples = np.asarray(samples, dtype=np.float64)
        qs = tuple(sorted(set(quantiles)))
        vals = np.quantile(samples, qs, axis=0).T if samples.shape[1] else np.zeros((0, len(qs)))
        # linear interpolation is monotone in q up to rounding; enforce it exactly
        vals = np.maximum.accumulate(vals, axis=1)
        return cls(qs, vals, samples.shape[0], samples if keep_samples else None)

    @classmethod
    def point(cls, forecast: np.ndarray, quantiles=QUANTILES) -> "ForecastGrid":
        qs = tuple(sorted(set(quantiles)))
        f = np.asarray(forecast, dtype=np.float64)
        return cls(qs, np.repeat(f[:, None], len(qs), axis=1), 1)
