"""Random search with a hard parameter cap and median pruning."""
from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, DivergenceError, StudyError
from .model import PARAMETER_BUDGET, C2farConfig, GaussianConfig, count_parameters
from .pipeline import TrainSchedule, train

logger = logging.getLogger(__name__)

# CLI-facing names -> (model kind, number of binning levels)
MODEL_KINDS = {
    "c2far-b1": ("c2far", 1),
    "c2far-b2": ("c2far", 2),
    "c2far-b3": ("c2far", 3),
    "deepar-gaussian": ("gaussian", 0),
}


@dataclass(frozen=True)
class SearchSpace:
    n_hidden: tuple[int, int] = (16, 288)
    learning_rate: tuple[float, float] = (1e-5, 1e-1)
    weight_decay: tuple[float, float] = (1e-7, 1e-2)
    flat_bins: tuple[int, int] = (4, 1024)
    level_bins: tuple[int, int] = (4, 128)
    budget: int = PARAMETER_BUDGET

    def __post_init__(self):
        for name in ("n_hidden", "learning_rate", "weight_decay", "flat_bins", "level_bins"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigurationError(f"bad range for {name}: {lo}..{hi}")


@dataclass
class TrialConfig:
    model: str
    config: C2farConfig | GaussianConfig
    learning_rate: float
    weight_decay: float

    @property
    def kind(self) -> str:
        return MODEL_KINDS[self.model][0]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "config": self.config.to_dict(),
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
        }


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def max_hidden(make_config, lo: int, hi: int, budget: int) -> int | None:
    """Largest n_hidden in [lo, hi] whose parameter count fits the budget (count is increasing in H)."""
    if count_parameters(make_config(lo)) > budget:
        return None
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if count_parameters(make_config(mid)) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


def sample_config(
    space: SearchSpace,
    model: str,
    rng: np.random.Generator,
    extent: tuple[float, float] = (-0.01, 1.01),
    lstm_dropout: float = 1e-3,
    covariate_dim: int = 2,
) -> TrialConfig:
    if model not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model {model!r}; expected one of {sorted(MODEL_KINDS)}")
    kind, n_levels = MODEL_KINDS[model]
    while True:
        if kind == "gaussian":
            levels: tuple[int, ...] = ()

            def make(h):
                return GaussianConfig(n_hidden=h, lstm_dropout=lstm_dropout, covariate_dim=covariate_dim)

        else:
            lo, hi = space.flat_bins if n_levels == 1 else space.level_bins
            levels = tuple(int(rng.integers(lo, hi + 1)) for _ in range(n_levels))

            def make(h, levels=levels):
                return C2farConfig(levels, extent[0], extent[1], h, lstm_dropout, covariate_dim)

        cap = max_hidden(make, space.n_hidden[0], space.n_hidden[1], space.budget)
        if cap is not None:
            break
        logger.debug("no feasible n_hidden for levels %s; resampling bins", levels)
    h = int(rng.integers(space.n_hidden[0], cap + 1))
    lr = _log_uniform(rng, *space.learning_rate)
    wd = _log_uniform(rng, *space.weight_decay)
    return TrialConfig(model, make(h), lr, wd)


@dataclass
class TrialRecord:
    number: int
    seed: int
    params: dict
    nds: list[float] = field(default_factory=list)
    status: str = "completed"  # completed | pruned | diverged
    pruned_at_checkpoint: int | None = None
    best_nd: float | None = None
    message: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class StudyResult:
    best: TrialRecord
    records: list[TrialRecord]
    best_model: object = None


class MedianPruner:
    """Prune when a trial's k-th validation ND is worse than the median of finished trials at k."""

    def __init__(self, warmup_trials: int = 5):
        self.warmup_trials = warmup_trials
        self.finished: list[list[float]] = []

    def should_prune(self, k: int, value: float) -> bool:
        if len(self.finished) < self.warmup_trials:
            return False
        prior = [nds[k - 1] for nds in self.finished if len(nds) >= k]
        if not prior:
            return False
        return value > statistics.median(prior)

    def report_finished(self, nds: Sequence[float]) -> None:
        self.finished.append(list(nds))


def run_study(
    space: SearchSpace,
    model: str,
    train_series,
    val_series,
    T: int,
    N: int,
    n_trials: int,
    schedule: TrainSchedule,
    seed: int = 0,
    pruning: bool = True,
    warmup_trials: int = 5,
    extent: tuple[float, float] = (-0.01, 1.01),
    log_path=None,
) -> StudyResult:
    """Run ``n_trials`` sequential trials and return the best by validation ND.

    The study log (JSON lines, one record per trial) holds no timings, so a
    fixed seed reproduces it byte for byte.
    """
    if n_trials < 1:
        raise ConfigurationError("n_trials must be at least 1")
    rng = np.random.default_rng(seed)
    pruner = MedianPruner(warmup_trials) if pruning else None
    records: list[TrialRecord] = []
    best_model, best_nd = None, math.inf
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("")
    for number in range(n_trials):
        trial = sample_config(space, model, rng, extent)
        trial_seed = int(rng.integers(2**31))
        rec = TrialRecord(number, trial_seed, trial.to_dict())

        def on_eval(k, value, pruner=pruner):
            return pruner is not None and pruner.should_prune(k, value)

        try:
            res = train(
                trial.kind, trial.config, train_series, val_series, T, N, schedule,
                trial.learning_rate, trial.weight_decay, trial_seed, on_eval,
            )
        except DivergenceError as exc:
            rec.status, rec.message = "diverged", str(exc)
        else:
            rec.nds = res.validation_nds
            rec.status = res.status
            rec.best_nd = None if math.isnan(res.best_nd) else res.best_nd
            if res.status == "pruned":
                rec.pruned_at_checkpoint = res.n_checkpoints
            elif pruner is not None:
                pruner.report_finished(rec.nds)
            if rec.status == "completed" and rec.best_nd is not None and rec.best_nd < best_nd:
                best_nd, best_model = rec.best_nd, res.model
        records.append(rec)
        logger.info("trial %d: %s best nd %s", number, rec.status, rec.best_nd)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(rec.to_json() + "\n")
    completed = [r for r in records if r.status == "completed" and r.best_nd is not None]
    if not completed:
        if all(r.status == "diverged" for r in records):
            raise StudyError(f"all {n_trials} trials diverged")
        raise StudyError("no trial completed with a validation score")
    best = min(completed, key=lambda r: (r.best_nd, r.number))
    return StudyResult(best, records, best_model)
