"""Non-learned reference forecasters."""
from __future__ import annotations

import numpy as np

from .exceptions import InputError
from .windows import QUANTILES, ForecastGrid, SeriesWindow


def naive_forecast(window: SeriesWindow, N: int, quantiles=QUANTILES) -> ForecastGrid:
    """Repeat the last observed value; every quantile collapses onto it."""
    if len(window.conditioning) == 0:
        raise InputError("empty conditioning range")
    return ForecastGrid.point(np.full(N, float(window.conditioning[-1])), quantiles)


def seasonal_naive_forecast(window: SeriesWindow, N: int, season_length: int, quantiles=QUANTILES) -> ForecastGrid:
    """Horizon h copies the last observed point with the same phase.

    The lag back from T+h is ``season_length * ceil(h / season_length)``.
    """
    c = np.asarray(window.conditioning, dtype=np.float64)
    T = len(c)
    if season_length < 1:
        raise InputError("season_length must be positive")
    if T < season_length:
        raise InputError(f"conditioning length {T} shorter than season {season_length}")
    h = np.arange(1, N + 1)
    lag = season_length * -(-h // season_length)
    return ForecastGrid.point(c[T + h - lag - 1], quantiles)


class NaiveForecaster:
    name = "naive"

    def grids(self, windows, quantiles=QUANTILES) -> list[ForecastGrid]:
        return [naive_forecast(w, w.N, quantiles) for w in windows]


class SeasonalNaiveForecaster:
    name = "seasonal-naive"

    def __init__(self, season_length: int):
        self.season_length = season_length

    def grids(self, windows, quantiles=QUANTILES) -> list[ForecastGrid]:
        return [seasonal_naive_forecast(w, w.N, self.season_length, quantiles) for w in windows]
