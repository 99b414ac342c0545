"""Training schedule, Monte Carlo forecasting, rolling evaluation, checkpoints.

Checkpoint layout (a directory):

* ``manifest.json``: ``format_version``, ``model_kind``, ``config`` (with the
  binning for binned models), ``schedule``, ``position`` (checkpoint index of
  the saved parameters), ``history`` and a ``tensors`` table whose entries
  give ``name``, ``shape``, ``offset`` (in bytes) and ``count``.
* ``params.bin``: the tensors concatenated in table order as little-endian
  32-bit floats, row-major.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import SeriesView
from .exceptions import DivergenceError, InputError
from .metrics import BANDS, MetricReport, evaluate_grids, nd
from .model import build_model, config_from_dict
from .nn import Adam
from .windows import (
    EXTREME_QUANTILES,
    QUANTILES,
    ForecastGrid,
    SeriesWindow,
    make_windows,
    normalize_window,
    stack_windows,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class TrainSchedule:
    train_batch_size: int = 1024
    ranges_per_checkpoint: int = 32768
    validation_eval_period: int = 2
    validation_warmup: int = 11
    stop_evals_no_improve: int = 37
    max_checkpoints: int = 750
    validation_rollouts: int = 25
    test_rollouts: int = 500
    max_validation_windows: int | None = None

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v is not None and v < 1:
                raise InputError(f"schedule field {name} must be positive, got {v}")


# -- forecasting -----------------------------------------------------------------


def window_noise(seed: int, window_id: int, n_rollouts: int, n_steps: int, n_noise: int) -> np.ndarray:
    """Uniforms for one window, shape (R, N, n_noise).

    The stream is keyed by (seed, window id); rollout r owns the r-th
    contiguous block, so results do not depend on how windows are batched.
    """
    rng = np.random.default_rng([seed, window_id])
    return rng.random((n_rollouts, n_steps, n_noise))


ROLLOUT_CHUNK = 1024


def sample_windows(model, windows: Sequence[SeriesWindow], n_rollouts: int, seed: int):
    """Unnormalized rollouts for each window, a list of (R, N) arrays.

    Each window is sampled on its own, its rollouts cut into fixed chunks of
    ``ROLLOUT_CHUNK``.  Batch shapes therefore never depend on which other
    windows are being forecast, which keeps results bit-identical under any
    ordering or partitioning of the windows.
    """
    if n_rollouts < 1:
        raise InputError("n_rollouts must be at least 1")
    model.eval()
    out: list[np.ndarray] = []
    for w in windows:
        w = w if w.normalized else normalize_window(w)
        noise = window_noise(seed, w.window_id, n_rollouts, w.N, model.n_noise)
        if w.N == 0:
            out.append(np.zeros((n_rollouts, 0)))
            continue
        parts = [
            model.sample_paths(w.conditioning[None], w.covariates[None], noise[None, r : r + ROLLOUT_CHUNK])[0]
            for r in range(0, n_rollouts, ROLLOUT_CHUNK)
        ]
        out.append(w.scaler.unnormalize(np.concatenate(parts)))
    return out


def forecast(
    model, window: SeriesWindow, n_rollouts: int, seed: int = 0, quantiles=QUANTILES, keep_samples: bool = False
) -> ForecastGrid:
    samples = sample_windows(model, [window], n_rollouts, seed)[0]
    return ForecastGrid.from_samples(samples, quantiles, keep_samples)


class ModelForecaster:
    """Adapter giving a trained model the same ``grids`` interface as the baselines."""

    def __init__(self, model, n_rollouts: int = 500, seed: int = 0):
        self.model = model
        self.n_rollouts = n_rollouts
        self.seed = seed
        self.name = model.kind

    def grids(self, windows, quantiles=QUANTILES) -> list[ForecastGrid]:
        samples = sample_windows(self.model, windows, self.n_rollouts, self.seed)
        return [ForecastGrid.from_samples(s, quantiles) for s in samples]


def default_quantiles(n_rollouts: int) -> tuple[float, ...]:
    """The nine deciles, plus the 0.5%/99.5% levels once there are enough rollouts to resolve them."""
    if n_rollouts >= 200:
        return tuple(sorted(QUANTILES + EXTREME_QUANTILES))
    return QUANTILES


# -- rolling evaluation -----------------------------------------------------------


@dataclass
class Evaluation:
    report: MetricReport
    windows: list[SeriesWindow]
    grids: list[ForecastGrid]


def rolling_evaluate(
    forecaster,
    series,
    T: int,
    N: int,
    quantiles=QUANTILES,
    bands=BANDS,
    stride: int = 1,
) -> Evaluation:
    """Forecast stride-1 windows and pool the metrics.

    Plain :class:`Series` inputs are treated as the whole test span: every
    window lying inside the series is scored in full.  :class:`SeriesView`
    inputs (from :func:`data.split`) score only the view's evaluation span,
    using earlier history as conditioning, so each evaluation point is
    forecast once at every horizon.
    """
    views = [s for s in series if isinstance(s, SeriesView)]
    if views and len(views) != len(series):
        raise InputError("mix of series and split views")
    if views:
        windows = make_windows(views, T, N, stride=stride, origins="eval")
        eval_start = {v.series.id: v.eval_start for v in views}
    else:
        windows = make_windows(series, T, N, stride=stride)
        eval_start = {}
    if not windows:
        raise InputError("no evaluation windows (series too short or constant)")
    grids = forecaster.grids(windows, quantiles)
    truths = []
    for w in windows:
        t = np.full(N, np.nan)
        t[: len(w.prediction)] = w.prediction
        first = eval_start.get(w.series_id)
        if first is not None:
            pos = w.start + w.T + np.arange(N)
            t[pos < first] = np.nan
        truths.append(t)
    return Evaluation(evaluate_grids(grids, truths, bands), windows, grids)


# -- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    model: torch.nn.Module
    kind: str
    config: object
    best_nd: float
    best_checkpoint: int
    history: list[dict] = field(default_factory=list)
    status: str = "completed"
    n_checkpoints: int = 0

    @property
    def validation_nds(self) -> list[float]:
        return [h["val_nd"] for h in self.history if "val_nd" in h]


def _validation_windows(val_views, T, N, cap):
    windows = make_windows(val_views, T, N, stride=N, origins="eval")
    if cap is not None and len(windows) > cap:
        keep = np.linspace(0, len(windows) - 1, cap).round().astype(int)
        windows = [windows[k] for k in np.unique(keep)]
    eval_start = {v.series.id: v.eval_start for v in val_views}
    truths = []
    for w in windows:
        t = np.full(N, np.nan)
        t[: len(w.prediction)] = w.prediction
        pos = w.start + w.T + np.arange(N)
        t[pos < eval_start[w.series_id]] = np.nan
        truths.append(t)
    return windows, truths


def validation_nd(model, windows, truths, n_rollouts: int, seed: int) -> float:
    samples = sample_windows(model, windows, n_rollouts, seed)
    med = np.concatenate([np.median(s, axis=0) for s in samples])
    z = np.concatenate(truths)
    ok = np.isfinite(z)
    return nd(med[ok], z[ok])


def train(
    kind: str,
    config,
    train_series,
    val_series,
    T: int,
    N: int,
    schedule: TrainSchedule | None = None,
    learning_rate: float = 1e-3,
    weight_decay: float = 0.0,
    seed: int = 0,
    on_eval: Callable[[int, float], bool] | None = None,
) -> TrainResult:
    """Fit a model and return the parameters of its best validation-ND checkpoint.

    ``val_series`` should be split views whose evaluation span is the
    validation period.  When no validation windows exist, or the schedule ends
    before the first scheduled evaluation, the final checkpoint is evaluated
    (or returned unevaluated with ``best_nd`` NaN).  ``on_eval(k, nd)`` is
    called after the k-th evaluation; returning True stops the run as pruned.
    """
    schedule = schedule or TrainSchedule()
    torch.manual_seed(seed)
    model = build_model(kind, config)
    windows = [normalize_window(w) for w in make_windows(train_series, T, N)]
    if not windows:
        raise InputError("no training windows")
    val_windows, val_truths = _validation_windows(val_series, T, N, schedule.max_validation_windows) if val_series else ([], [])
    rng = np.random.default_rng([seed, 1])
    opt = Adam(model, learning_rate, weight_decay)
    order = rng.permutation(len(windows))
    cursor = 0
    history: list[dict] = []
    best = (math.inf, 0, copy.deepcopy(model.state_dict()))
    n_evals = since_best = 0
    status = "completed"
    c = 0
    for c in range(1, schedule.max_checkpoints + 1):
        model.train()
        seen, loss_sum, n_batches = 0, 0.0, 0
        while seen < schedule.ranges_per_checkpoint:
            size = min(schedule.train_batch_size, schedule.ranges_per_checkpoint - seen)
            idx = []
            while len(idx) < size:
                if cursor == len(order):
                    order, cursor = rng.permutation(len(windows)), 0
                take = min(size - len(idx), len(order) - cursor)
                idx.extend(order[cursor : cursor + take])
                cursor += take
            vals, cov = stack_windows([windows[k] for k in idx])
            loss = model.forward_train(model.prepare(vals, cov), T)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite training loss at checkpoint {c}, batch {n_batches + 1}")
            opt.step(loss)
            loss_sum += loss.item()
            n_batches += 1
            seen += size
        entry = {"checkpoint": c, "train_nll": loss_sum / n_batches}
        last = c == schedule.max_checkpoints
        due = c >= schedule.validation_warmup and (c - schedule.validation_warmup) % schedule.validation_eval_period == 0
        if val_windows and (due or (last and n_evals == 0)):
            score = validation_nd(model, val_windows, val_truths, schedule.validation_rollouts, seed)
            if not math.isfinite(score):
                raise DivergenceError(f"non-finite validation ND at checkpoint {c}")
            entry["val_nd"] = score
            n_evals += 1
            if score < best[0]:
                best = (score, c, copy.deepcopy(model.state_dict()))
                since_best = 0
            else:
                since_best += 1
            logger.info("checkpoint %d: train nll %.4f, val nd %.4f", c, entry["train_nll"], score)
            history.append(entry)
            if on_eval is not None and on_eval(n_evals, score):
                status = "pruned"
                break
            if since_best >= schedule.stop_evals_no_improve:
                break
        else:
            history.append(entry)
    if n_evals:
        model.load_state_dict(best[2])
        best_nd, best_c = best[0], best[1]
    else:
        best_nd, best_c = math.nan, c
    model.eval()
    return TrainResult(model, kind, config, best_nd, best_c, history, status, c)


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(path, result: TrainResult, schedule: TrainSchedule | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors, offset, blobs = [], 0, []
    for name, t in result.model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    config = result.config.to_dict()
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_kind": result.kind,
        "config": config,
        "binning": result.model.spec.to_dict() if hasattr(result.model, "spec") else None,
        "schedule": asdict(schedule) if schedule else None,
        "position": result.best_checkpoint,
        "best_nd": None if math.isnan(result.best_nd) else result.best_nd,
        "history": result.history,
        "tensors": tensors,
    }
    (path / "params.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(path):
    """Rebuild a model from a checkpoint directory; returns (model, manifest)."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "params.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    kind = manifest["model_kind"]
    model = build_model(kind, config_from_dict(kind, manifest["config"]))
    state = {}
    for entry in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=entry["count"], offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model, manifest


# -- CSV writers ------------------------------------------------------------------------


def write_metrics_csv(path, report: MetricReport) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(report.to_csv())


def write_forecast_csv(path, windows: Sequence[SeriesWindow], grids: Sequence[ForecastGrid]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_id", "horizon", "quantile", "value"])
        for win, g in zip(windows, grids):
            for h in range(g.horizon):
                for j, q in enumerate(g.quantiles):
                    w.writerow([win.window_id, h + 1, f"{q:g}", repr(float(g.values[h, j]))])
