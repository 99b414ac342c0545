"""Series records, JSON-lines I/O, synthetic generators, splits and covariates."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InputError

FREQS = {"H": timedelta(hours=1), "D": timedelta(days=1)}
SEASON_LENGTH = {"H": 24, "D": 7}
DEFAULT_START = datetime(2021, 1, 4)  # a Monday


@dataclass
class Series:
    id: str
    start: datetime
    freq: str
    values: np.ndarray

    def __post_init__(self):
        if self.freq not in FREQS:
            raise InputError(f"unknown frequency {self.freq!r}; expected one of {sorted(FREQS)}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) < 1:
            raise InputError(f"series {self.id!r} needs at least one value")
        if not np.all(np.isfinite(self.values)):
            raise InputError(f"series {self.id!r} has non-finite values")

    def __len__(self) -> int:
        return len(self.values)

    def timestamp(self, index: int) -> datetime:
        return self.start + index * FREQS[self.freq]

    def covariates(self, length: int | None = None) -> np.ndarray:
        """Calendar covariates for positions ``0 .. length-1`` (may run past the data)."""
        n = len(self) if length is None else length
        unit = "h" if self.freq == "H" else "D"
        ts = np.datetime64(self.start, unit) + np.arange(n)
        days = ts.astype("datetime64[D]")
        weekday = (days.astype(np.int64) + 3) % 7  # 1970-01-01 was a Thursday
        if self.freq == "H":
            hour = (ts - days).astype(np.int64)
            return np.stack([hour / 23.0, weekday / 6.0], axis=-1)
        dom = (days - days.astype("datetime64[M]")).astype(np.int64)
        return np.stack([weekday / 6.0, dom / 30.0], axis=-1)


def time_features(timestamp: datetime, freq: str) -> np.ndarray:
    if freq == "H":
        return np.array([timestamp.hour / 23.0, timestamp.weekday() / 6.0])
    if freq == "D":
        return np.array([timestamp.weekday() / 6.0, (timestamp.day - 1) / 30.0])
    raise InputError(f"unknown frequency {freq!r}")


COVARIATE_DIM = 2


# -- JSON lines ----------------------------------------------------------------


def load_jsonl(path) -> list[Series]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Series(
                        id=str(rec["id"]),
                        start=datetime.fromisoformat(rec["start"]),
                        freq=rec["freq"],
                        values=np.asarray(rec["values"], dtype=np.float64),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: malformed series record ({exc})") from exc
    return out


def write_jsonl(series: Iterable[Series], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in series:
            rec = {"id": s.id, "start": s.start.isoformat(), "freq": s.freq, "values": [float(v) for v in s.values]}
            fh.write(json.dumps(rec) + "\n")


# -- synthetic data ------------------------------------------------------------

GMM_WEIGHTS = (0.3, 0.4, 0.3)
GMM_MEANS = (-3.0, 0.0, 3.0)
GMM_STD = 0.4


def gen_gmm(
    n_series: int = 50,
    length: int = 2000,
    weights: Sequence[float] = GMM_WEIGHTS,
    means: Sequence[float] = GMM_MEANS,
    std: float = GMM_STD,
    seed: int = 0,
    freq: str = "H",
) -> list[Series]:
    """I.i.d. draws from a 1-d Gaussian mixture with a shared component std."""
    w = np.asarray(weights, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64)
    if w.shape != mu.shape or np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
        raise InputError("mixture weights must be non-negative, sum to 1 and match the means")
    if std <= 0:
        raise InputError("std must be positive")
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(w), size=(n_series, length), p=w)
    vals = mu[comp] + std * rng.standard_normal((n_series, length))
    return [Series(f"gmm_{i}", DEFAULT_START, freq, vals[i]) for i in range(n_series)]


def gmm_cdf(x, weights=GMM_WEIGHTS, means=GMM_MEANS, std=GMM_STD):
    from scipy.stats import norm

    x = np.asarray(x, dtype=np.float64)
    return sum(w * norm.cdf(x, loc=m, scale=std) for w, m in zip(weights, means))


def gen_discrete_uniform(
    n_series: int = 50, length: int = 2000, lo: int = 1, hi: int = 10, seed: int = 0, freq: str = "H"
) -> list[Series]:
    if int(lo) != lo or int(hi) != hi or lo > hi:
        raise InputError(f"need integers lo <= hi, got {lo}, {hi}")
    rng = np.random.default_rng(seed)
    vals = rng.integers(int(lo), int(hi) + 1, size=(n_series, length)).astype(np.float64)
    return [Series(f"discrete_{i}", DEFAULT_START, freq, vals[i]) for i in range(n_series)]


# -- splits --------------------------------------------------------------------


@dataclass
class SplitConfig:
    validation_points: int
    test_points: int


@dataclass
class SeriesView:
    """A prefix of a series; points from ``eval_start`` on are the evaluation span."""

    series: Series
    end: int
    eval_start: int

    @property
    def values(self) -> np.ndarray:
        return self.series.values[: self.end]

    def __len__(self) -> int:
        return self.end


def split(series: Sequence[Series], config: SplitConfig) -> tuple[list[SeriesView], list[SeriesView], list[SeriesView]]:
    """Suffix split: train | validation | test, validation/test views keep earlier history."""
    val_n, test_n = config.validation_points, config.test_points
    if val_n < 0 or test_n < 0:
        raise InputError("split sizes must be non-negative")
    train, val, test = [], [], []
    for s in series:
        n = len(s)
        if val_n + test_n >= n:
            raise InputError(f"series {s.id!r} (length {n}) too short for {val_n}+{test_n} held-out points")
        n_train = n - val_n - test_n
        train.append(SeriesView(s, n_train, 0))
        if val_n:
            val.append(SeriesView(s, n_train + val_n, n_train))
        if test_n:
            test.append(SeriesView(s, n, n - test_n))
    return train, val, test
