"""``isolayer`` command-line interface.

Subcommands::

    gen           write a synthetic dataset CSV
    fit           train an isotonic layer, PAVA or Platt model on a dataset
    calibrate     fit per-context layers on frozen upstream scores
    train-dual    train the dual-head debiasing model
    eval          metric report for a model on a dataset
    score         predictions CSV for a model on a dataset
    export-curve  sample a model's calibration curve on a grid

Every flag can also come from ``--config FILE``, a JSON object whose keys are
flag names (``batch_size`` or ``batch-size``); values there override the
command line.  Exit codes: 0 success, 2 usage or config error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
from scipy.special import expit

from . import bias_sim
from .baselines import PlattParams, StepFunction, pava_fit, pava_predict, platt_fit, platt_predict
from .context import EmbeddingTable, conditioned_forward, fit_conditioned
from .core import ConfigError, CorruptInputError, IsotonicConfig, IsotonicParams, forward
from .dual_tower import (DualTowerModel, DualTrainConfig, inference_head, isotonic_head,
                         train_dual_tower)
from .metrics import evaluate, normalized_entropy
from .persist import (CalibratorModel, IsotonicModel, dumps, load_model, parse_floats, read_dataset,
                      read_table, save_model, write_dataset, write_table)
from .training import LOSS_CLAMP, NumericalError, TrainConfig, calibrate_frozen, fit

log = logging.getLogger("isolayer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SCHEMA_VERSION = 1
# file locations never enter the embedded run config, so reruns into another
# directory still produce identical bytes
_PATH_KEYS = {"config", "data", "scores", "model", "out", "report"}

__all__ = ["build_parser", "main", "predict"]


# ---------------------------------------------------------------------------
# helpers

def _run_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items()
           if k not in _PATH_KEYS and k != "func" and v is not None}
    cfg["schema_version"] = SCHEMA_VERSION
    return cfg


def _apply_config(args) -> None:
    if not args.config:
        return
    try:
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(overrides, dict):
        raise ConfigError("config file must hold a JSON object")
    version = overrides.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}")
    command = overrides.pop("command", args.command)
    if command != args.command:
        raise ConfigError(f"config is for {command!r}, not {args.command!r}")
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest in ("func", "command", "config") or not hasattr(args, dest):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        setattr(args, dest, value)


def _layer_config(args) -> IsotonicConfig:
    return IsotonicConfig(args.lower_bound, args.upper_bound, args.bucket_width,
                          args.units, args.clip_epsilon)


def _train_config(args) -> TrainConfig:
    return TrainConfig(args.epochs, args.batch_size, args.lr, args.optimizer,
                       args.seed, args.w_init_factor, args.schedule)


def _write_json(path, obj) -> None:
    text = dumps(obj)
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _bce(p, y) -> float:
    p = np.clip(p, LOSS_CLAMP, 1 - LOSS_CLAMP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def _fit_summary(preds, labels) -> dict:
    out = {"train_bce": _bce(preds, labels)}
    base = labels.mean()
    out["base_rate_bce"] = _bce(np.full_like(labels, base), labels)
    out["normalized_entropy"] = normalized_entropy(preds, labels) if 0 < base < 1 else None
    return out


def _has(col) -> bool:
    return bool(np.any(np.asarray(col) != ""))


# ---------------------------------------------------------------------------
# prediction

def predict(model, ds) -> dict:
    """Named prediction columns of ``model`` on a dataset.

    Dual-tower models give ``inference`` and ``isotonic`` columns, every other
    kind a single ``prediction`` column.
    """
    x = ds.input
    if isinstance(model, StepFunction):
        # staircases live on the probability scale, as classical PAVA does
        return {"prediction": np.atleast_1d(pava_predict(model, expit(x)))}
    if isinstance(model, PlattParams):
        return {"prediction": platt_predict(model, x)}
    if isinstance(model, IsotonicModel):
        if model.table is not None:
            return {"prediction": conditioned_forward(x, model.params, model.config,
                                                      ds.context_id, model.table)}
        if model.task_units is None:
            return {"prediction": forward(x, model.params, model.config)}
        out = np.empty(len(x))
        for task in set(ds.task_id.tolist()):
            if task not in model.task_units:
                raise CorruptInputError(f"task {task!r} has no unit in this model")
            rows = ds.task_id == task
            out[rows] = forward(x[rows], model.params, model.config, model.task_units[task])
        return {"prediction": out}
    if isinstance(model, CalibratorModel):
        out = np.empty(len(x))
        identity = IsotonicParams.identity(model.config)
        for ctx in set(ds.context_id.tolist()):
            rows = ds.context_id == ctx
            params = model.params.get(ctx)
            if params is None:
                log.warning("context %r not calibrated; using identity", ctx)
                params = identity
            out[rows] = forward(x[rows], params, model.config)
        return {"prediction": out}
    if isinstance(model, DualTowerModel):
        if ds.feature_dim != model.tower.input_dim:
            raise CorruptInputError(f"dataset has {ds.feature_dim} features, model expects "
                                    f"{model.tower.input_dim}")
        inf, iso = np.empty(len(x)), np.empty(len(x))
        for task in set(ds.task_id.tolist()):
            if task not in model.tasks:
                raise CorruptInputError(f"task {task!r} unknown to this model")
            rows = np.flatnonzero(ds.task_id == task)
            sub = ds.subset(rows)
            inf[rows] = inference_head(sub.features, model, task)
            iso[rows] = isotonic_head(sub.features, sub.context_id, model, task)
        return {"inference": inf, "isotonic": iso}
    raise TypeError(f"cannot predict with {type(model).__name__}")


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    if args.scenario == "quadratic":
        ds = bias_sim.gen_quadratic(args.n, args.seed)
    elif args.scenario == "piecewise":
        ds = bias_sim.gen_piecewise(args.n, args.seed)
    else:
        try:
            sc = bias_sim.PositionBiasScenario(
                position_count=args.positions, exposure_policy=args.policy,
                ranker_noise=args.ranker_noise, label_model=args.label_model,
                sample_count=args.n, seed=args.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        ds = bias_sim.gen_position_logs(sc)
    write_dataset(ds, args.out)
    if args.report:
        _write_json(args.report, {"run_config": _run_config(args), "rows": len(ds),
                                  "positives": int(ds.label.sum())})
    return EXIT_OK


def cmd_fit(args) -> int:
    ds = read_dataset(args.data)
    if len(ds) == 0:
        raise CorruptInputError("dataset has no rows")
    meta = {"run_config": _run_config(args)}
    if args.kind == "pava":
        order = np.argsort(ds.input, kind="stable")
        model = pava_fit(expit(ds.input[order]), ds.label[order])
        train = {"epochs_run": 0, "seed": args.seed}
    elif args.kind == "platt":
        model = platt_fit(ds.input, ds.label)
        train = {"epochs_run": 0, "seed": args.seed}
    else:
        cfg, hp = _layer_config(args), _train_config(args)
        if args.context:
            if cfg.units != 1:
                raise ConfigError("context-conditioned fits are single-unit")
            base = IsotonicParams.initial(cfg, hp.w_init_factor)
            table = EmbeddingTable.zeros(set(ds.context_id.tolist()), cfg,
                                         context_bias=args.context_bias,
                                         mode=args.context_mode, base=base)
            params, table, rep = fit_conditioned(ds.input, ds.label, ds.context_id, cfg, hp,
                                                 base, table)
            model = IsotonicModel(cfg, params, table)
        else:
            params, rep = fit(ds, cfg, hp)
            model = IsotonicModel(cfg, params, None, rep.extra.get("task_units"))
        train = rep.to_dict()
    preds = predict(model, ds)["prediction"]
    if not np.all(np.isfinite(preds)):
        raise NumericalError("fitted model produced non-finite predictions")
    report = {"kind": args.kind, "count": len(ds), "train": train, **meta,
              **_fit_summary(preds, ds.label)}
    save_model(args.out, model, meta)
    _write_json(args.report, report)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cols = read_table(args.scores, required=("prediction", "label", "context_id"))
    scores = parse_floats(cols["prediction"], "prediction")
    labels = parse_floats(cols["label"], "label")
    expected = [c for c in (args.contexts or "").split(",") if c]
    res = calibrate_frozen(scores, labels, cols["context_id"], _layer_config(args),
                           _train_config(args), expected)
    meta = {"run_config": _run_config(args)}
    save_model(args.out, CalibratorModel(_layer_config(args), res.params, res.fallbacks), meta)
    _write_json(args.report, {"kind": "calibration", **meta, "fallbacks": res.fallbacks,
                              "contexts": {c: r.to_dict() for c, r in res.reports.items()}})
    return EXIT_OK


def cmd_train_dual(args) -> int:
    ds = read_dataset(args.data)
    if ds.feature_dim == 0:
        raise CorruptInputError("dual-tower training needs feature columns")
    tasks = [t for t in ds.tasks() if t]
    if not tasks:
        raise CorruptInputError("dual-tower training needs task_id values")
    try:
        hidden = tuple(int(h) for h in str(args.hidden).split(",") if h.strip())
    except ValueError:
        raise ConfigError(f"bad --hidden {args.hidden!r}") from None
    cfg = _layer_config(args)
    model = DualTowerModel.create(ds.feature_dim, tasks, set(ds.context_id.tolist()) - {""},
                                  cfg, hidden, args.activation, args.alpha, args.beta,
                                  args.seed, args.context_bias, args.inference_affine)
    hp = DualTrainConfig(args.epochs, args.batch_size, args.lr, args.iso_lr,
                         args.optimizer, args.seed, args.schedule)
    model, rep = train_dual_tower(ds, model, hp)
    meta = {"run_config": _run_config(args)}
    save_model(args.out, model, meta)
    _write_json(args.report, {"kind": "dual_tower", "count": len(ds), "tasks": tasks,
                              "train": rep.to_dict(), **meta})
    return EXIT_OK


def _eval_block(preds, ds) -> dict:
    groups = ds.context_id if _has(ds.context_id) else None
    truth = ds.latent_truth if not np.any(np.isnan(ds.latent_truth)) else None
    block = {"all": evaluate(preds, ds.label, groups, truth).to_dict()}
    tasks = ds.tasks()
    if len(tasks) > 1:
        block["by_task"] = {}
        for t in tasks:
            rows = np.flatnonzero(ds.task_id == t)
            sub = ds.subset(rows)
            block["by_task"][t] = evaluate(
                preds[rows], sub.label, sub.context_id if groups is not None else None,
                sub.latent_truth if truth is not None else None).to_dict()
    return block


def cmd_eval(args) -> int:
    model, meta = load_model(args.model)
    ds = read_dataset(args.data)
    if len(ds) == 0:
        raise CorruptInputError("dataset has no rows")
    heads = {name: _eval_block(p, ds) for name, p in predict(model, ds).items()}
    _write_json(args.out, {"count": len(ds), "heads": heads,
                           "model_run_config": meta.get("run_config", {}),
                           "run_config": _run_config(args)})
    return EXIT_OK


def cmd_score(args) -> int:
    model, _ = load_model(args.model)
    ds = read_dataset(args.data)
    preds = predict(model, ds)
    if "inference" in preds:
        header = ["prediction", "prediction_iso"]
        cols = [preds["inference"], preds["isotonic"]]
    else:
        header, cols = ["prediction"], [preds["prediction"]]
    write_table(args.out, header + ["label", "context_id", "task_id"],
                cols + [ds.label, ds.context_id, ds.task_id])
    return EXIT_OK


def cmd_export_curve(args) -> int:
    model, _ = load_model(args.model)
    if args.points < 2 or not args.lo < args.hi:
        raise ConfigError("need --points >= 2 and --lo < --hi")
    grid = np.linspace(args.lo, args.hi, args.points)
    contexts = args.context or []
    curves = {}
    if isinstance(model, (StepFunction, PlattParams)) or (
            isinstance(model, IsotonicModel) and model.table is None):
        if contexts:
            raise ConfigError("this model has no contexts")
        ds = bias_sim.LabeledDataset(grid, np.zeros_like(grid))
        if isinstance(model, IsotonicModel) and model.task_units is not None:
            unit = model.task_units.get(args.task) if args.task else 0
            if unit is None:
                raise ConfigError(f"unknown task {args.task!r}")
            curves["y"] = forward(grid, model.params, model.config, unit)
        else:
            curves["y"] = predict(model, ds)["prediction"]
    elif isinstance(model, CalibratorModel):
        for c in contexts or sorted(model.params):
            if c not in model.params:
                raise ConfigError(f"unknown context {c!r}")
            curves[f"y_{c}"] = forward(grid, model.params[c], model.config)
    else:
        if isinstance(model, DualTowerModel):
            task = args.task or model.tasks[0]
            if task not in model.heads:
                raise ConfigError(f"unknown task {task!r}")
            params, table, cfg = model.heads[task].params, model.heads[task].table, model.config
        else:
            params, table, cfg = model.params, model.table, model.config
        for c in contexts or [table.reference_context]:
            if c not in table.vocabulary:
                raise ConfigError(f"unknown context {c!r}")
            curves[f"y_{c}" if contexts else "y"] = conditioned_forward(grid, params, cfg, c, table)
    write_table(args.out, ["x", *curves], [grid, *curves.values()])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _layer_flags(p):
    g = p.add_argument_group("layer")
    g.add_argument("--lower-bound", type=float, default=-17.0)
    g.add_argument("--upper-bound", type=float, default=8.0)
    g.add_argument("--bucket-width", type=float, default=0.05)
    g.add_argument("--units", type=int, default=1)
    g.add_argument("--clip-epsilon", type=float, default=1e-9)


def _train_flags(p, epochs=20, batch=256, lr=1e-2):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=epochs)
    g.add_argument("--batch-size", type=int, default=batch)
    g.add_argument("--lr", type=float, default=lr)
    g.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--schedule", choices=("constant", "cosine"), default="cosine",
                   help="learning-rate schedule over the whole run")
    return g


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isolayer", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of flag overrides")
        p.set_defaults(func=func)
        return p

    p = command("gen", cmd_gen, "write a synthetic dataset")
    p.add_argument("scenario", choices=("quadratic", "piecewise", "position"))
    p.add_argument("--n", type=int, default=1000,
                   help="rows (impressions for the position scenario)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positions", type=int, default=5)
    p.add_argument("--policy", choices=("oracle-sorted", "uniform"), default="oracle-sorted")
    p.add_argument("--label-model", choices=("multiplicative", "logit-shift"),
                   default="multiplicative")
    p.add_argument("--ranker-noise", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    p = command("fit", cmd_fit, "train a layer or baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("isotonic", "pava", "platt"), default="isotonic")
    p.add_argument("--context", action="store_true",
                   help="condition the layer on context_id")
    p.add_argument("--context-mode", choices=("additive", "replace"), default="additive")
    p.add_argument("--context-bias", action="store_true")
    _layer_flags(p)
    _train_flags(p).add_argument("--w-init-factor", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    p = command("calibrate", cmd_calibrate, "per-context calibration of frozen scores")
    p.add_argument("--scores", required=True,
                   help="CSV with prediction, label and context_id columns")
    p.add_argument("--contexts", help="comma-separated contexts that must get a model")
    _layer_flags(p)
    _train_flags(p).add_argument("--w-init-factor", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    p = command("train-dual", cmd_train_dual, "train the dual-head model")
    p.add_argument("--data", required=True)
    _layer_flags(p)
    g = _train_flags(p, epochs=20, batch=512, lr=5e-3)
    g.add_argument("--iso-lr", type=float, default=1e-3)
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--beta", type=float, default=0.75)
    g.add_argument("--hidden", default="16,16")
    g.add_argument("--activation", choices=("tanh", "softplus", "identity"), default="tanh")
    g.add_argument("--context-bias", action="store_true")
    g.add_argument("--inference-affine", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    p = command("eval", cmd_eval, "metric report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = command("score", cmd_score, "write predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = command("export-curve", cmd_export_curve, "sample a calibration curve")
    p.add_argument("--model", required=True)
    p.add_argument("--lo", type=float, default=-5.0)
    p.add_argument("--hi", type=float, default=5.0)
    p.add_argument("--points", type=int, default=101)
    p.add_argument("--context", action="append", help="repeat for several contexts")
    p.add_argument("--task")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_config(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"isolayer: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"isolayer: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptInputError, ValueError, OSError) as exc:
        print(f"isolayer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def _entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    _entry()
