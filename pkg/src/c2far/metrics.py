"""Forecast accuracy metrics.

All sums pool every (series, time) point into one global numerator and
denominator; nothing is averaged per series.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import InputError, MetricError
from .windows import QUANTILES, ForecastGrid

BANDS = {"80": (0.1, 0.9), "99": (0.005, 0.995)}


def pinball(alpha, q, z):
    """(alpha - 1[z < q]) * (z - q), elementwise."""
    q = np.asarray(q, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    out = (alpha - (z < q)) * (z - q)
    return float(out) if out.ndim == 0 else out


def _denominator(truths: np.ndarray) -> float:
    d = float(np.abs(truths).sum())
    if d == 0.0:
        raise MetricError("sum of |truth| is zero; normalized metric undefined")
    return d


def _pair(forecasts, truths):
    f = np.asarray(forecasts, dtype=np.float64).reshape(-1)
    z = np.asarray(truths, dtype=np.float64).reshape(-1)
    if f.shape != z.shape:
        raise InputError(f"forecast/truth length mismatch: {f.shape} vs {z.shape}")
    return f, z


def quantile_loss(alpha: float, forecasts, truths) -> float:
    f, z = _pair(forecasts, truths)
    return float(np.sum(2.0 * pinball(alpha, f, z))) / _denominator(z)


def nd(forecasts, truths) -> float:
    f, z = _pair(forecasts, truths)
    return float(np.sum(np.abs(z - f))) / _denominator(z)


def wql(quantile_forecasts: Mapping[float, np.ndarray], truths, quantiles: Sequence[float] = QUANTILES) -> float:
    """Mean of the quantile losses at ``quantiles`` (default 0.1 ... 0.9)."""
    return float(np.mean([quantile_loss(q, _lookup(quantile_forecasts, q), truths) for q in quantiles]))


def coverage_sharpness(quantile_forecasts: Mapping[float, np.ndarray], truths, q_l: float, q_u: float):
    """(fraction of truths with lower < z <= upper, sum|upper - lower| / sum|z|)."""
    if not q_l < q_u:
        raise InputError("need q_l < q_u")
    lower, z = _pair(_lookup(quantile_forecasts, q_l), truths)
    upper, _ = _pair(_lookup(quantile_forecasts, q_u), truths)
    if len(z) == 0:
        raise MetricError("no points")
    coverage = float(np.mean((lower < z) & (z <= upper)))
    sharpness = float(np.sum(np.abs(upper - lower))) / _denominator(z)
    return coverage, sharpness


def _lookup(quantile_forecasts: Mapping[float, np.ndarray], q: float) -> np.ndarray:
    for k, v in quantile_forecasts.items():
        if abs(k - q) < 1e-12:
            return np.asarray(v, dtype=np.float64)
    raise InputError(f"quantile {q} missing from forecasts")


@dataclass
class MetricReport:
    nd: float
    wql: float
    ql: dict[float, float]
    coverage: dict[str, tuple[float, float]] = field(default_factory=dict)
    nd_by_horizon: list[float] = field(default_factory=list)
    wql_by_horizon: list[float] = field(default_factory=list)
    nll: float | None = None
    n_points: int = 0

    def rows(self) -> list[tuple[str, str, str, float]]:
        out = [("nd", "overall", "", self.nd), ("wql", "overall", "", self.wql)]
        for q, v in self.ql.items():
            out.append((f"ql_{q:g}", "overall", "", v))
        for name, (cov, sharp) in self.coverage.items():
            out.append((f"coverage_{name}", "overall", "", cov))
            out.append((f"sharpness_{name}", "overall", "", sharp))
        if self.nll is not None:
            out.append(("nll", "overall", "", self.nll))
        for h, v in enumerate(self.nd_by_horizon, start=1):
            out.append(("nd", "horizon", str(h), v))
        for h, v in enumerate(self.wql_by_horizon, start=1):
            out.append(("wql", "horizon", str(h), v))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "scope", "horizon", "value"])
        for name, scope, h, v in self.rows():
            w.writerow([name, scope, h, repr(float(v))])
        return buf.getvalue()


def evaluate_grids(
    grids: Sequence[ForecastGrid], truths: Sequence[np.ndarray], bands: Mapping[str, tuple[float, float]] = BANDS
) -> MetricReport:
    """Pool forecast grids against their truths.

    Truth entries that are NaN are not scored; rolling evaluation uses this to
    drop predictions that fall outside the evaluation span.  Per-horizon
    scores pool all points forecast at horizon index h.
    """
    if len(grids) != len(truths) or not grids:
        raise InputError("need one truth vector per grid and at least one grid")
    qs = grids[0].quantiles
    n_h = max(g.horizon for g in grids)
    f = np.full((len(grids), n_h, len(qs)), np.nan)
    z = np.full((len(grids), n_h), np.nan)
    for k, (g, t) in enumerate(zip(grids, truths)):
        if g.quantiles != qs:
            raise InputError("all grids must share one quantile set")
        t = np.asarray(t, dtype=np.float64)[: g.horizon]
        f[k, : g.horizon] = g.values
        z[k, : len(t)] = t
    mask = np.isfinite(z)
    nine = [q for q in QUANTILES if any(abs(q - k) < 1e-12 for k in qs)]

    def score(sel):
        zs = z[sel]
        fq = {q: f[..., j][sel] for j, q in enumerate(qs)}
        return zs, fq

    zs, fq = score(mask)
    report = MetricReport(
        nd=nd(_lookup(fq, 0.5), zs),
        wql=wql(fq, zs) if len(nine) == 9 else math.nan,
        ql={q: quantile_loss(q, _lookup(fq, q), zs) for q in nine},
        n_points=int(mask.sum()),
    )
    for name, (lo, hi) in bands.items():
        if any(abs(lo - k) < 1e-12 for k in qs) and any(abs(hi - k) < 1e-12 for k in qs):
            report.coverage[name] = coverage_sharpness(fq, zs, lo, hi)
    for h in range(n_h):
        sel = np.zeros_like(mask)
        sel[:, h] = mask[:, h]
        zh, fh = score(sel)
        try:
            report.nd_by_horizon.append(nd(_lookup(fh, 0.5), zh))
            report.wql_by_horizon.append(wql(fh, zh) if len(nine) == 9 else math.nan)
        except MetricError:
            report.nd_by_horizon.append(math.nan)
            report.wql_by_horizon.append(math.nan)
    return report


def nll_eval(model, windows, batch_size: int = 256) -> float:
    """Mean per-point NLL over the prediction ranges of normalized windows (teacher forced)."""
    import torch

    from .windows import stack_windows

    if not windows:
        raise InputError("no windows to evaluate")
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            chunk = windows[i : i + batch_size]
            vals, cov = stack_windows(chunk)
            nll = model.point_nll(model.prepare(vals, cov), chunk[0].T).double()
            total += float(nll.sum())
            count += nll.numel()
    return total / count
