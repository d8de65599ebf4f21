"""Dataset CSV and model JSON persistence.

Datasets use the fixed header ``input,feat_0..feat_{d-1},context_id,task_id,label,latent_truth``
with floats written as shortest round-trip decimals, empty cells for absent
optional values and LF line endings.

Models are stored as a JSON envelope::

    {"format_version": 1, "kind": ..., "config": {...}, "params": {...}, "metadata": {...}}

Keys are sorted and floats use ``repr``, so save -> load -> save is
byte-identical.  Embedding tables store only their non-zero rows.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .baselines import PlattParams, StepFunction
from .bias_sim import LabeledDataset
from .context import EmbeddingTable
from .core import ConfigError, CorruptInputError, IsotonicConfig, IsotonicParams
from .dual_tower import DualTowerModel, IsoHead, RelevanceTower

FORMAT_VERSION = 1
KINDS = ("isotonic", "calibration", "pava", "platt", "dual_tower")
OPTIONAL_TAIL = ("context_id", "task_id", "label", "latent_truth")

__all__ = ["CalibratorModel", "FORMAT_VERSION", "IsotonicModel", "KINDS", "SchemaError",
           "decode_model", "dumps", "encode_model", "load_model", "parse_floats", "read_dataset",
           "read_table", "save_model", "write_dataset", "write_table"]


class SchemaError(CorruptInputError):
    """A file does not follow the expected column or envelope layout."""


@dataclass
class IsotonicModel:
    """A trained layer; ``table`` is set for context-conditioned fits and
    ``task_units`` maps task ids to units for multi-unit fits."""

    config: IsotonicConfig
    params: IsotonicParams
    table: EmbeddingTable | None = None
    task_units: dict | None = None


@dataclass
class CalibratorModel:
    """Independent per-context layers fitted on frozen upstream scores."""

    config: IsotonicConfig
    params: dict
    fallbacks: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# CSV

def _fmt(v) -> str:
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def write_table(path, header, columns) -> None:
    """Write equal-length columns under ``header``; floats via ``repr``."""
    cells = []
    for col in columns:
        if isinstance(col, np.ndarray) and col.dtype.kind == "f":
            cells.append([_fmt(v) for v in col.tolist()])
        else:
            cells.append([str(v) for v in col])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(zip(*cells))


def read_table(path, required=()) -> dict:
    """Columns of a CSV file as lists of strings, keyed by header name."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    for k, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}: line {k} has {len(row)} cells, expected {len(header)}")
    cols = list(zip(*body)) if body else [()] * len(header)
    return {name: list(col) for name, col in zip(header, cols)}


def parse_floats(values, name, optional=False) -> np.ndarray:
    """Parse CSV cells as finite floats; empty cells become NaN when ``optional``."""
    out = np.empty(len(values))
    for k, s in enumerate(values):
        if s == "":
            if not optional:
                raise CorruptInputError(f"column {name!r}: empty cell in row {k + 1}")
            out[k] = np.nan
            continue
        try:
            out[k] = float(s)
        except ValueError:
            raise CorruptInputError(f"column {name!r}: cannot parse {s!r} in row {k + 1}") from None
        if not math.isfinite(out[k]):
            raise CorruptInputError(f"column {name!r}: non-finite value in row {k + 1}")
    return out


def _check_header(header, path):
    feats = [c for c in header if re.fullmatch(r"feat_\d+", c)]
    expected = ["input"] + [f"feat_{k}" for k in range(len(feats))] + list(OPTIONAL_TAIL)
    if header == expected:
        return len(feats)
    missing = [c for c in expected if c not in header]
    unexpected = [c for c in header if c not in expected]
    if not missing and not unexpected:
        raise SchemaError(f"{path}: columns out of order; expected {expected}")
    raise SchemaError(f"{path}: schema mismatch; missing {missing}, unexpected {unexpected}")


def write_dataset(ds: LabeledDataset, path) -> None:
    header = ["input"] + [f"feat_{k}" for k in range(ds.feature_dim)] + list(OPTIONAL_TAIL)
    columns = [ds.input] + [ds.features[:, k] for k in range(ds.feature_dim)]
    columns += [ds.context_id, ds.task_id, ds.label, ds.latent_truth]
    write_table(path, header, columns)


def read_dataset(path) -> LabeledDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise SchemaError(f"{path}: empty file")
    d = _check_header(header, path)
    cols = read_table(path)
    label = parse_floats(cols["label"], "label")
    if np.any((label < 0) | (label > 1)):
        raise CorruptInputError(f"{path}: labels must lie in [0, 1]")
    truth = parse_floats(cols["latent_truth"], "latent_truth", optional=True)
    feats = np.column_stack([parse_floats(cols[f"feat_{k}"], f"feat_{k}") for k in range(d)]) \
        if d else None
    return LabeledDataset(parse_floats(cols["input"], "input"), label, feats,
                          np.array(cols["context_id"], dtype=object),
                          np.array(cols["task_id"], dtype=object), truth)


# ---------------------------------------------------------------------------
# JSON envelope

def dumps(obj) -> str:
    """Canonical JSON text: sorted keys, repr floats, no NaN, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _table_to_json(table: EmbeddingTable) -> dict:
    rows = {c: table.rows[k].tolist() for k, c in enumerate(table.vocabulary)
            if np.any(table.rows[k] != 0)}
    return {
        "vocabulary": list(table.vocabulary),
        "reference_context": table.reference_context,
        "mode": table.mode,
        "frozen_reference": bool(table.frozen_reference),
        "rows": rows,
        "context_bias": None if table.context_bias is None else table.context_bias.tolist(),
    }


def _table_from_json(d: dict, cfg: IsotonicConfig) -> EmbeddingTable:
    vocab = list(d["vocabulary"])
    rows = np.zeros((len(vocab), cfg.num_buckets))
    index = {c: k for k, c in enumerate(vocab)}
    for c, row in d["rows"].items():
        if c not in index:
            raise SchemaError(f"embedding row for unknown context {c!r}")
        rows[index[c]] = row
    return EmbeddingTable(vocab, rows, d.get("context_bias"), d["reference_context"],
                          d["mode"], d.get("frozen_reference", True))


def _layer_to_json(p: IsotonicParams) -> dict:
    return {"weights": p.weights.tolist(), "bias": p.bias.tolist()}


def _layer_from_json(d: dict, cfg: IsotonicConfig) -> IsotonicParams:
    p = IsotonicParams(d["weights"], d["bias"])
    p.check(cfg)
    return p


def encode_model(model, metadata: dict | None = None) -> dict:
    """Envelope dict for any supported model object."""
    if isinstance(model, IsotonicModel):
        kind, config = "isotonic", model.config.to_dict()
        params = _layer_to_json(model.params)
        params["table"] = None if model.table is None else _table_to_json(model.table)
        params["task_units"] = model.task_units
    elif isinstance(model, CalibratorModel):
        kind, config = "calibration", model.config.to_dict()
        params = {"contexts": {c: _layer_to_json(p) for c, p in model.params.items()},
                  "fallbacks": list(model.fallbacks)}
    elif isinstance(model, StepFunction):
        kind, config = "pava", {}
        params = {"breakpoints": model.breakpoints.tolist(), "levels": model.levels.tolist(),
                  "weights": model.weights.tolist()}
    elif isinstance(model, PlattParams):
        kind, config = "platt", {}
        params = {"slope": float(model.slope), "intercept": float(model.intercept)}
    elif isinstance(model, DualTowerModel):
        kind, config = "dual_tower", model.config.to_dict()
        params = {
            "tower": {"activation": model.tower.activation,
                      "weights": [w.tolist() for w in model.tower.weights],
                      "biases": [b.tolist() for b in model.tower.biases]},
            "tasks": list(model.tasks),
            "heads": {t: {**_layer_to_json(h.params), "table": _table_to_json(h.table)}
                      for t, h in model.heads.items()},
            "loss_weights": {t: [float(a), float(b)] for t, (a, b) in model.loss_weights.items()},
            "inference_affine": None if model.inference_affine is None else {
                t: v.tolist() for t, v in model.inference_affine.items()},
        }
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    return {"format_version": FORMAT_VERSION, "kind": kind, "config": config,
            "params": params, "metadata": metadata or {}}


def decode_model(env: dict):
    """Inverse of :func:`encode_model`; returns ``(model, metadata)``."""
    try:
        version, kind = env["format_version"], env["kind"]
        params, raw_cfg = env["params"], env["config"]
    except (KeyError, TypeError):
        raise SchemaError("not a model envelope") from None
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported format_version {version!r}")
    if kind not in KINDS:
        raise SchemaError(f"unknown model kind {kind!r}")
    try:
        if kind == "pava":
            model = StepFunction(params["breakpoints"], params["levels"], params["weights"])
        elif kind == "platt":
            model = PlattParams(params["slope"], params["intercept"])
        else:
            cfg = IsotonicConfig.from_dict(raw_cfg)
            if kind == "isotonic":
                table = params.get("table")
                model = IsotonicModel(cfg, _layer_from_json(params, cfg),
                                      None if table is None else _table_from_json(table, cfg),
                                      params.get("task_units"))
            elif kind == "calibration":
                model = CalibratorModel(cfg, {c: _layer_from_json(p, cfg)
                                              for c, p in params["contexts"].items()},
                                        list(params["fallbacks"]))
            else:
                t = params["tower"]
                tower = RelevanceTower(t["weights"], t["biases"], t["activation"])
                heads = {task: IsoHead(_layer_from_json(h, cfg), _table_from_json(h["table"], cfg))
                         for task, h in params["heads"].items()}
                affine = params.get("inference_affine")
                model = DualTowerModel(
                    tower, params["tasks"], heads,
                    {task: tuple(v) for task, v in params["loss_weights"].items()}, cfg,
                    None if affine is None else {task: np.asarray(v, dtype=float)
                                                 for task, v in affine.items()})
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed {kind} envelope: {exc}") from None
    except ConfigError as exc:
        raise SchemaError(f"inconsistent {kind} envelope: {exc}") from None
    return model, env.get("metadata", {})


def save_model(path, model, metadata: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(encode_model(model, metadata)))


def load_model(path):
    """``(model, metadata)`` read from an envelope file."""
    try:
        with open(path, encoding="utf-8") as fh:
            env = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return decode_model(env)
