"""Command-line entry point.

Every option can also come from a JSON or YAML file passed with
``--config``; keys are option names with dashes replaced by underscores.
Flags given on the command line override file values, and a flag repeated
on the command line keeps its last value.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .exceptions import C2farError

OUTPUT_ENV = "C2FAR_OUTPUT_DIR"
DEFAULT_OUTPUT = "c2far_out"
MODELS = ("c2far-b1", "c2far-b2", "c2far-b3", "deepar-gaussian", "naive", "seasonal-naive")
DEFAULT_BINS = {"c2far-b1": (40,), "c2far-b2": (20, 20), "c2far-b3": (8, 8, 8)}
SCHEDULE_FLAGS = {
    "batch_size": "train_batch_size",
    "ranges_per_checkpoint": "ranges_per_checkpoint",
    "eval_period": "validation_eval_period",
    "warmup": "validation_warmup",
    "patience": "stop_evals_no_improve",
    "max_checkpoints": "max_checkpoints",
    "val_rollouts": "validation_rollouts",
    "test_rollouts": "test_rollouts",
    "max_val_windows": "max_validation_windows",
}

logger = logging.getLogger("c2far")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in str(text).split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_pair(text: str) -> tuple[float, float]:
    try:
        parts = tuple(float(x) for x in str(text).split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from exc
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return parts


def _grid(text: str) -> tuple[float, float, int]:
    parts = str(text).split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi,count', got {text!r}")
    try:
        return float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi,count', got {text!r}") from exc


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML file with option defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default=None, help=f"default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}")
    p.add_argument("--workers", type=int, default=1, help="torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="JSON-lines series file")
    p.add_argument("--context", "-T", type=int, default=168, help="conditioning range length")
    p.add_argument("--horizon", "-N", type=int, default=24, help="prediction range length")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=MODELS, default="c2far-b2")
    p.add_argument("--bins", type=_int_list, help="per-level bin counts, e.g. 12,35")
    p.add_argument("--extent", type=_float_pair, default=None, help="binning extent lo,hi (default -0.01,1.01)")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--dropout", type=float, default=1e-3)


def _add_schedule(p: argparse.ArgumentParser) -> None:
    for flag in SCHEDULE_FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), type=int, default=None)
    p.add_argument("--val-points", type=int, default=None, help="validation points per series (default: horizon)")
    p.add_argument("--test-points", type=int, default=None, help="held-out test points per series (default: horizon)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2far", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset as JSON lines")
    _add_common(p)
    p.add_argument("--kind", choices=("gmm", "discrete"), default="gmm")
    p.add_argument("--n-series", type=int, default=50)
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--freq", choices=("H", "D"), default="H")
    p.add_argument("--output", help="output file (default: <output-dir>/<kind>.jsonl)")

    p = sub.add_parser("train", help="train a model and save its best checkpoint")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_schedule(p)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.0)

    p = sub.add_parser("tune", help="random search with median pruning")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_schedule(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--no-pruning", action="store_true")
    p.add_argument("--prune-warmup", type=int, default=5)

    p = sub.add_parser("forecast", help="forecast the N steps after each series")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--rollouts", type=int, default=500)

    p = sub.add_parser("evaluate", help="rolling evaluation of a checkpoint or baseline")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", help="checkpoint directory (learned models)")
    p.add_argument("--model", choices=("naive", "seasonal-naive"), default=None)
    p.add_argument("--bins", type=_int_list, help=argparse.SUPPRESS)
    p.add_argument("--test-points", type=int, default=None, help="score only the last P points (default: whole series)")
    p.add_argument("--rollouts", type=int, default=500)
    p.add_argument("--season", type=int, default=None, help="season length (default from frequency)")

    p = sub.add_parser("plot-data", help="write (x, pdf, cdf) over a grid")
    _add_common(p)
    p.add_argument("--grid", type=_grid, required=False, help="lo,hi,count")
    p.add_argument("--checkpoint", help="use the next-step density of a trained model")
    p.add_argument("--data", help="series file (with --checkpoint)")
    p.add_argument("--series-index", type=int, default=0)
    p.add_argument("--context", "-T", type=int, default=168)
    p.add_argument("--bins", type=_int_list, help="binning for a uniform-probability density")
    p.add_argument("--extent", type=_float_pair, default=None)
    p.add_argument("--alpha", type=_float_pair, default=(1.0, 1.0), help="tail shapes hi,lo")

    p = sub.add_parser("nll-eval", help="mean teacher-forced NLL on test windows")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--test-points", type=int, default=None)
    return parser


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text()
    if path.endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


_CONVERTERS = {"bins": _int_list, "extent": _float_pair, "grid": _grid, "alpha": _float_pair}


# options whose values may start with a minus sign (e.g. ``--extent -0.01,1.01``)
_SIGNED_VALUE_FLAGS = ("--extent", "--grid", "--alpha")


def _join_signed_values(argv: list[str]) -> list[str]:
    out: list[str] = []
    i = 0
    while i < len(argv):
        if argv[i] in _SIGNED_VALUE_FLAGS and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def parse(argv=None) -> argparse.Namespace:
    """Parse and validate arguments; usage problems exit with status 2."""
    parser = build_parser()
    argv = _join_signed_values(list(sys.argv[1:] if argv is None else argv))
    args = parser.parse_args(argv)
    if args.config:
        try:
            file_values = _load_config_file(args.config)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config file {args.config}: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(file_values) - known)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        converted = {}
        for k, v in file_values.items():
            if k in _CONVERTERS and not isinstance(v, (list, tuple)):
                v = _CONVERTERS[k](v)
            converted[k] = tuple(v) if isinstance(v, list) else v
        sub.set_defaults(**converted)
        args = parser.parse_args(argv)
    _validate(parser, args)
    return args


def _validate(parser, args) -> None:
    cmd = args.command
    needs_data = {"train", "tune", "forecast", "evaluate", "nll-eval"}
    if cmd in needs_data and not args.data:
        parser.error(f"{cmd} needs --data")
    if cmd in ("train", "tune"):
        if args.model in ("naive", "seasonal-naive"):
            parser.error(f"{args.model} has nothing to {cmd}; use evaluate")
        if args.model == "deepar-gaussian":
            if args.bins is not None or args.extent is not None:
                parser.error("--bins/--extent do not apply to deepar-gaussian")
        elif cmd == "train":
            if args.bins is None:
                args.bins = DEFAULT_BINS[args.model]
            want = int(args.model[-1])
            if len(args.bins) != want:
                parser.error(f"{args.model} needs {want} bin counts, got {len(args.bins)}")
        elif args.bins is not None:
            parser.error("tune samples bin counts; do not pass --bins")
    if cmd in ("forecast", "nll-eval") and not args.checkpoint:
        parser.error(f"{cmd} needs --checkpoint")
    if cmd == "evaluate":
        if args.bins is not None:
            parser.error("--bins does not apply to evaluate")
        if bool(args.checkpoint) == bool(args.model):
            parser.error("evaluate needs exactly one of --checkpoint or --model naive|seasonal-naive")
    if cmd == "plot-data":
        if args.grid is None:
            parser.error("plot-data needs --grid lo,hi,count")
        if bool(args.checkpoint) == bool(args.bins):
            parser.error("plot-data needs exactly one of --checkpoint or --bins")
        if args.checkpoint and not args.data:
            parser.error("plot-data --checkpoint needs --data")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be positive")


# -- command implementations -----------------------------------------------------


def _output_dir(args) -> Path:
    out = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _schedule(args):
    from .pipeline import TrainSchedule

    overrides = {field_name: getattr(args, flag) for flag, field_name in SCHEDULE_FLAGS.items()}
    return TrainSchedule(**{k: v for k, v in overrides.items() if v is not None})


def _splits(args):
    from .data import SplitConfig, load_jsonl, split

    series = load_jsonl(args.data)
    val = args.horizon if args.val_points is None else args.val_points
    test = args.horizon if args.test_points is None else args.test_points
    return split(series, SplitConfig(val, test))


def _cmd_gen_synthetic(args) -> int:
    from .data import gen_discrete_uniform, gen_gmm, write_jsonl

    gen = gen_gmm if args.kind == "gmm" else gen_discrete_uniform
    series = gen(n_series=args.n_series, length=args.length, seed=args.seed, freq=args.freq)
    path = Path(args.output) if args.output else _output_dir(args) / f"{args.kind}.jsonl"
    write_jsonl(series, path)
    print(path)
    return 0


def _model_config(args):
    from .model import C2farConfig, GaussianConfig

    if args.model == "deepar-gaussian":
        return "gaussian", GaussianConfig(n_hidden=args.hidden, lstm_dropout=args.dropout)
    lo, hi = args.extent or (-0.01, 1.01)
    return "c2far", C2farConfig(args.bins, lo, hi, args.hidden, args.dropout)


def _cmd_train(args) -> int:
    from .pipeline import save_checkpoint, train

    kind, config = _model_config(args)
    tr, va, _ = _splits(args)
    schedule = _schedule(args)
    res = train(kind, config, tr, va, args.context, args.horizon, schedule, args.lr, args.weight_decay, args.seed)
    out = _output_dir(args)
    save_checkpoint(out / "checkpoint", res, schedule)
    (out / "train_log.json").write_text(json.dumps(res.history, indent=2) + "\n")
    print(f"best validation ND {res.best_nd:.6g} at checkpoint {res.best_checkpoint}; saved to {out / 'checkpoint'}")
    return 0


def _cmd_tune(args) -> int:
    from .pipeline import TrainResult, save_checkpoint
    from .tune import SearchSpace, run_study

    tr, va, _ = _splits(args)
    out = _output_dir(args)
    schedule = _schedule(args)
    study = run_study(
        SearchSpace(), args.model, tr, va, args.context, args.horizon, args.trials, schedule,
        seed=args.seed, pruning=not args.no_pruning, warmup_trials=args.prune_warmup,
        extent=tuple(args.extent or (-0.01, 1.01)), log_path=out / "study.jsonl",
    )
    best = study.best
    if study.best_model is not None:
        model = study.best_model
        res = TrainResult(model, model.kind, model.config, best.best_nd, 0, [], "completed")
        save_checkpoint(out / "best_checkpoint", res, schedule)
    (out / "best_trial.json").write_text(best.to_json() + "\n")
    print(f"best trial {best.number}: validation ND {best.best_nd:.6g}")
    return 0


def _cmd_forecast(args) -> int:
    from .data import load_jsonl
    from .pipeline import forecast, load_checkpoint, write_forecast_csv
    from .windows import SeriesWindow

    model, _ = load_checkpoint(args.checkpoint)
    series = load_jsonl(args.data)
    T, N = args.context, args.horizon
    windows, grids = [], []
    for wid, s in enumerate(series):
        if len(s) < T:
            logger.warning("series %s shorter than the context; skipped", s.id)
            continue
        cond = s.values[-T:]
        if cond.max() == cond.min():
            logger.warning("series %s has a constant context; skipped", s.id)
            continue
        cov = s.covariates(len(s) + N)[len(s) - T :]
        w = SeriesWindow(s.id, wid, len(s) - T, cond.copy(), None, cov)
        windows.append(w)
        grids.append(forecast(model, w, args.rollouts, args.seed, _quantiles(args.rollouts)))
    out = _output_dir(args)
    write_forecast_csv(out / "forecasts.csv", windows, grids)
    print(out / "forecasts.csv")
    return 0


def _quantiles(n_rollouts):
    from .pipeline import default_quantiles

    return default_quantiles(n_rollouts)


def _cmd_evaluate(args) -> int:
    from .baselines import NaiveForecaster, SeasonalNaiveForecaster
    from .data import SEASON_LENGTH, SplitConfig, load_jsonl, split
    from .pipeline import ModelForecaster, load_checkpoint, rolling_evaluate, write_forecast_csv, write_metrics_csv
    from .windows import EXTREME_QUANTILES, QUANTILES

    series = load_jsonl(args.data)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        forecaster = ModelForecaster(model, args.rollouts, args.seed)
        quantiles = _quantiles(args.rollouts)
    else:
        if args.model == "naive":
            forecaster = NaiveForecaster()
        else:
            season = args.season or SEASON_LENGTH[series[0].freq]
            forecaster = SeasonalNaiveForecaster(season)
        quantiles = tuple(sorted(QUANTILES + EXTREME_QUANTILES))
    target = series if args.test_points is None else split(series, SplitConfig(0, args.test_points))[2]
    ev = rolling_evaluate(forecaster, target, args.context, args.horizon, quantiles)
    out = _output_dir(args)
    write_metrics_csv(out / "metrics.csv", ev.report)
    write_forecast_csv(out / "eval_forecasts.csv", ev.windows, ev.grids)
    print(f"ND {ev.report.nd:.6g}  wQL {ev.report.wql:.6g}  ({ev.report.n_points} points)")
    return 0


def _cmd_plot_data(args) -> int:
    import csv

    from .distribution import cdf_grid, pdf_grid

    lo, hi, count = args.grid
    if count < 2 or not hi > lo:
        raise C2farError("grid needs lo < hi and count >= 2")
    xs = np.linspace(lo, hi, count)
    if args.checkpoint:
        from .data import load_jsonl
        from .pipeline import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)
        if model.kind != "c2far":
            raise C2farError("plot-data needs a binned (c2far) checkpoint")
        series = load_jsonl(args.data)[args.series_index]
        T = args.context
        cond = series.values[-T:]
        s_lo, s_hi = float(cond.min()), float(cond.max())
        if not s_hi > s_lo:
            raise C2farError("constant context; density undefined")
        cov = series.covariates(len(series) + 1)[len(series) - T :]
        provider, tails = model.next_step_conditionals((cond - s_lo) / (s_hi - s_lo), cov)
        spec = model.spec
        z = (xs - s_lo) / (s_hi - s_lo)
        pdf = pdf_grid(spec, provider, tails, z) / (s_hi - s_lo)
        cdf = cdf_grid(spec, provider, tails, z)
    else:
        from .binning import build_spec

        e_lo, e_hi = args.extent or (-0.01, 1.01)
        spec = build_spec(args.bins, e_lo, e_hi)

        def provider(prefix):
            k = spec.levels[len(prefix)]
            return np.full(k, 1.0 / k)

        pdf = pdf_grid(spec, provider, args.alpha, xs)
        cdf = cdf_grid(spec, provider, args.alpha, xs)
    out = _output_dir(args) / "density.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "pdf", "cdf"])
        for row in zip(xs, pdf, cdf):
            w.writerow([repr(float(v)) for v in row])
    print(out)
    return 0


def _cmd_nll_eval(args) -> int:
    from .data import SplitConfig, load_jsonl, split
    from .metrics import nll_eval
    from .pipeline import load_checkpoint
    from .windows import make_windows, normalize_window

    model, _ = load_checkpoint(args.checkpoint)
    series = load_jsonl(args.data)
    if args.test_points is not None:
        series = split(series, SplitConfig(0, args.test_points))[2]
        windows = make_windows(series, args.context, args.horizon, stride=args.horizon, origins="eval")
        windows = [w for w in windows if len(w.prediction) == args.horizon]
    else:
        windows = make_windows(series, args.context, args.horizon, stride=args.horizon)
    value = nll_eval(model, [normalize_window(w) for w in windows])
    out = _output_dir(args)
    (out / "nll.csv").write_text(f"metric,scope,horizon,value\nnll,overall,,{value!r}\n")
    print(f"mean NLL {value:.6g} over {len(windows)} windows")
    return 0


COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "train": _cmd_train,
    "tune": _cmd_tune,
    "forecast": _cmd_forecast,
    "evaluate": _cmd_evaluate,
    "plot-data": _cmd_plot_data,
    "nll-eval": _cmd_nll_eval,
}


def run(args: argparse.Namespace) -> int:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    import torch

    torch.set_num_threads(args.workers)
    # denormals in the LSTM gates slow training severalfold; restore IEEE behaviour afterwards
    torch.set_flush_denormal(True)
    try:
        return COMMANDS[args.command](args)
    except (C2farError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        torch.set_flush_denormal(False)


def main(argv=None) -> int:
    return run(parse(argv))


if __name__ == "__main__":
    sys.exit(main())
