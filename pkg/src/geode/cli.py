"""Command-line interface: ``geode {fit,score,impute,classify,simulate,mpcr,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import io as gio
from .baseline import mpcr_baseline
from .bench import run_bench
from .dictionary import fit_dictionary
from .errors import ConfigError, DataError, DrawCountMismatch, GeodeError, ModelFileError, NumericError
from .inference import classify, fit, impute, log_density
from .model import Hyperparams
from .scenarios import simulate_scenario
from .tree import build_tree

__all__ = ["main", "build_parser", "RUN_KEYS", "resolve_config"]

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# Non-hyperparameter keys a run configuration may carry.
RUN_KEYS = {
    "data",
    "out",
    "samples_per_draw",
    "D_grid",
    "n",
    "repeats",
    "bench_iters",
    "scenario",
    "response",
    "scales",
    "test",
}

logger = logging.getLogger("geode")


def resolve_config(path, seed=None) -> tuple[Hyperparams, dict]:
    """Split a config file into hyperparameters and run options; ``--seed`` wins."""
    values = gio.load_config(path) if path else {}
    hyper_keys = set(Hyperparams.__dataclass_fields__)
    unknown = sorted(set(values) - hyper_keys - RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    hyper_vals = {k: v for k, v in values.items() if k in hyper_keys}
    if seed is not None:
        hyper_vals["seed"] = seed
    try:
        hyper = Hyperparams.from_dict(hyper_vals)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return hyper, {k: v for k, v in values.items() if k in RUN_KEYS}


def _need(value, name):
    if value is None:
        raise ConfigError(f"missing required setting {name!r} (pass it as an argument or in --config)")
    return value


def _emit(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def cmd_fit(args) -> int:
    hyper, run = resolve_config(args.config, args.seed)
    data_path = _need(args.data or run.get("data"), "data")
    out = _need(args.out or run.get("out"), "out")
    Y = gio.read_matrix(data_path)
    if Y.size == 0:
        raise DataError(f"{data_path}: no observations")
    model = fit(Y, hyper)
    gio.save_model(model, out)
    logger.info("wrote model with %d draws over %d nodes to %s", model.n_draws, model.tree.n_nodes, out)
    return EXIT_OK


def cmd_score(args) -> int:
    model = gio.load_model(args.model)
    Y = gio.read_matrix(args.data)
    if Y.shape[0] and Y.shape[1] != model.D:
        raise DataError(f"{args.data}: {Y.shape[1]} columns, model expects {model.D}")
    scores = log_density(model, Y) if Y.shape[0] else np.empty(0)
    _emit(gio.write_table(None, {"row": np.arange(len(scores)), "log_density": scores}), args.out)
    return EXIT_OK


def cmd_impute(args) -> int:
    model = gio.load_model(args.model)
    Y = gio.read_matrix(args.data)
    if Y.shape[0] and Y.shape[1] != model.D:
        raise DataError(f"{args.data}: {Y.shape[1]} columns, model expects {model.D}")
    seed = model.hyperparams.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    cols = {k: [] for k in ("row", "column", "mean", "sd", "lower", "upper")}
    for i, y in enumerate(Y):
        if not np.isnan(y).any():
            continue
        res = impute(model, y, rng=rng, samples_per_draw=args.samples_per_draw)
        cols["row"].extend([i] * res.missing.size)
        cols["column"].extend(res.missing.tolist())
        for key in ("mean", "sd", "lower", "upper"):
            cols[key].extend(getattr(res, key).tolist())
    _emit(gio.write_table(None, cols), args.out)
    return EXIT_OK


def cmd_classify(args) -> int:
    models = [gio.load_model(p) for p in args.models]
    Y = gio.read_matrix(args.data)
    cols = {"row": [], "label": []}
    cols.update({f"vote_{c}": [] for c in range(len(models))})
    for i, y in enumerate(Y):
        res = classify(models, y, allow_unequal_draws=args.allow_unequal_draws)
        cols["row"].append(i)
        cols["label"].append(res.label)
        for c, v in enumerate(res.votes):
            cols[f"vote_{c}"].append(float(v))
    _emit(gio.write_table(None, cols), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    _, run = resolve_config(args.config, args.seed)
    scenario = _need(args.scenario or run.get("scenario"), "scenario")
    seed = 0 if args.seed is None else args.seed
    n = args.n or run.get("n") or 600
    sc = simulate_scenario(scenario, n=n, D=args.D, p=args.p, seed=seed, missing=args.missing)
    prefix = Path(_need(args.out or run.get("out"), "out"))
    gio.write_matrix(prefix.with_suffix(".csv"), sc.data)
    if args.missing:
        gio.write_matrix(prefix.with_suffix(".complete.csv"), sc.complete)
    prefix.with_suffix(".truth.json").write_text(json.dumps(sc.truth, sort_keys=True))
    return EXIT_OK


def cmd_mpcr(args) -> int:
    hyper, run = resolve_config(args.config, args.seed)
    train = gio.read_matrix(_need(args.data or run.get("data"), "data"))
    test = gio.read_matrix(_need(args.test or run.get("test"), "test"))
    response = int(_need(args.response if args.response is not None else run.get("response"), "response"))
    if not 0 <= response < train.shape[1]:
        raise ConfigError(f"response index {response} outside 0..{train.shape[1] - 1}")
    truth = test[:, response].copy()
    if np.isnan(truth).any():
        raise DataError("test rows must contain the true response value")
    tree = build_tree(train, hyper.L, hyper.cell_size)
    dic = fit_dictionary(tree, train, hyper.d_upper, hyper.seed, hyper.oversample, hyper.power_iters)
    scales = run.get("scales") or list(range(tree.depth + 1))
    mse = [mpcr_baseline(tree, dic, train, test, s, response, truth).mse for s in scales]
    _emit(gio.write_table(None, {"scale": scales, "mse": mse}), args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    hyper, run = resolve_config(args.config, args.seed)
    report = run_bench(
        D_grid=tuple(run.get("D_grid", (500, 1000, 2000, 4000))),
        n=run.get("n", 600),
        d_upper=hyper.d_upper,
        L=hyper.L,
        iters=run.get("bench_iters", 30),
        repeats=run.get("repeats", 3),
        seed=hyper.seed,
        scenario=run.get("scenario", 7),
    )
    _emit(json.dumps(report, sort_keys=True, indent=2) + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of hyperparameters and run options")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", help="output path ('-' or omitted writes tables to stdout)")
    common.add_argument("--threads", type=int, help="cap on BLAS/LAPACK threads")
    common.add_argument("--log-level", default="WARNING", help="logging level (DEBUG prints one record per iteration)")

    parser = argparse.ArgumentParser(prog="geode", description="Multiscale factor-mixture density estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit a model to a matrix file")
    p.add_argument("data", nargs="?")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", parents=[common], help="posterior-mean log-density of each row")
    p.add_argument("model")
    p.add_argument("data")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("impute", parents=[common], help="impute the missing cells of each row")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--samples-per-draw", type=int, default=1)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("classify", parents=[common], help="vote among per-class models")
    p.add_argument("models", nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--allow-unequal-draws", action="store_true")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic scenario")
    p.add_argument("scenario", nargs="?", help="1-9, threemix or parabola")
    p.add_argument("--n", type=int)
    p.add_argument("--D", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--missing", action="store_true", help="hide 20%% of the entries at random")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mpcr", parents=[common], help="MPCR baseline test error at each scale")
    p.add_argument("data", nargs="?", help="training matrix")
    p.add_argument("--test", help="test matrix including the true response column")
    p.add_argument("--response", type=int, help="response column index")
    p.set_defaults(func=cmd_mpcr)

    p = sub.add_parser("bench", parents=[common], help="stage timings across ambient dimensions")
    p.set_defaults(func=cmd_bench)
    return parser


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, ModelFileError, DrawCountMismatch, OSError)):
        return EXIT_DATA
    if isinstance(exc, GeodeError):
        return EXIT_DATA
    return EXIT_NUMERIC


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        print(f"geode: error: unknown log level {args.log_level!r}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        print("geode: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            return args.func(args)
    except (GeodeError, OSError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"geode {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
