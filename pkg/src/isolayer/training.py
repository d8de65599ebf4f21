"""Loss, hand-derived gradients, optimizers and training loops for the layer.

The pre-activation is affine in the effective weights ``relu(w + offset)``,
so every gradient has a closed form::

    dL/dz        = y - t                      (BCE on a sigmoid output)
    dL/dw_j      = (y - t) * a_j * [w_j + offset_j > 0]
    dL/db        = (y - t)
    dL/doffset_j = dL/dw_j
    dL/dx        = (y - t) * relu(w_i + offset_i)   (i = active bucket)

Batch gradients are weighted sums of these per-example terms; the default
weight ``1/n`` gives the gradient of the mean loss.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit

from .core import ConfigError, IsotonicConfig, IsotonicParams, clip_input, preactivation

log = logging.getLogger(__name__)

LOSS_CLAMP = 1e-12


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class ClampedPredictionWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# loss

def bce_loss(preds, labels) -> float:
    """Mean binary cross-entropy of probabilities against labels.

    Predictions outside ``(0, 1)`` are clamped to ``[1e-12, 1 - 1e-12]`` and a
    :class:`ClampedPredictionWarning` is emitted.
    """
    preds = np.asarray(preds, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if preds.size == 0:
        raise ValueError("bce_loss of an empty batch")
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions vs {labels.size} labels")
    bad = (preds <= 0) | (preds >= 1)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} predictions clamped into (0, 1)",
                      ClampedPredictionWarning, stacklevel=2)
        preds = np.clip(preds, LOSS_CLAMP, 1 - LOSS_CLAMP)
    return float(-np.mean(labels * np.log(preds) + (1 - labels) * np.log1p(-preds)))


def bce_from_logits(z, labels, weights=None) -> float:
    """BCE computed from logits, ``softplus(z) - t*z``; never needs clamping."""
    z = np.asarray(z, dtype=float)
    labels = np.asarray(labels, dtype=float)
    per_row = np.logaddexp(0.0, z) - labels * z
    if weights is None:
        return float(per_row.mean())
    return float(np.dot(np.asarray(weights, dtype=float), per_row))


# --------------------------------------------------------------------------
# gradients

@dataclass
class GradientBundle:
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_offset: np.ndarray | None = None
    d_input: np.ndarray | None = None
    d_context_bias: np.ndarray | None = None
    loss: float | None = None


@dataclass
class _Pass:
    """Intermediate values of one batched forward pass."""

    z: np.ndarray
    idx: np.ndarray
    partial: np.ndarray
    inside: np.ndarray
    pair: np.ndarray
    pair_unit: np.ndarray
    pair_ctx: np.ndarray
    gate: np.ndarray
    eff: np.ndarray


def _forward_pass(x, params, cfg, units, table, ctx, bias_offset) -> _Pass:
    # prefix-sum evaluation: O(n + pairs * N) instead of O(n * N).  It agrees
    # with core.preactivation to rounding; the exact-monotone path stays there.
    x = np.asarray(x, dtype=float)
    xt = clip_input(x, cfg)
    xt = np.atleast_1d(xt)
    width = cfg.bucket_width
    shifted = (xt - cfg.lower_bound) + width
    idx = np.clip(np.floor(shifted / width), 0, cfg.num_buckets - 1).astype(np.int64)
    partial = np.clip(shifted - idx * width, 0.0, width)
    inside = (x > cfg.lower_bound + cfg.clip_epsilon) & (x < cfg.upper_bound - cfg.clip_epsilon)

    keys = units * len(table) + ctx
    uniq, pair = np.unique(keys, return_inverse=True)
    pair_unit, pair_ctx = np.divmod(uniq, len(table))
    raw = params.weights[pair_unit] + table[pair_ctx]
    gate = raw > 0  # relu'(0) := 0
    eff = np.where(gate, raw, 0.0)
    below = np.cumsum(eff, axis=1) - eff
    z = (width * below[pair, idx] + partial * eff[pair, idx]
         + cfg.residue + params.bias[units] + bias_offset)
    return _Pass(z, idx, partial, inside, pair, pair_unit, pair_ctx, gate, eff)


def _offset_table(offset, contexts, n, cfg):
    if offset is None:
        return np.zeros((1, cfg.num_buckets)), np.zeros(n, dtype=np.int64), "none"
    offset = np.asarray(offset, dtype=float)
    if offset.shape[-1] != cfg.num_buckets:
        raise ConfigError("offset length does not match the bucket count")
    if offset.ndim == 1:
        return offset[None, :], np.zeros(n, dtype=np.int64), "shared"
    if contexts is not None:
        return offset, np.asarray(contexts, dtype=np.int64), "table"
    if offset.shape[0] != n:
        raise ConfigError("per-row offsets need one row per input")
    return offset, np.arange(n), "rows"


def backward(x, labels, params: IsotonicParams, cfg: IsotonicConfig, unit=0,
             offset=None, contexts=None, sample_weight=None,
             bias_offset=0.0) -> GradientBundle:
    """Gradients of the (weighted) BCE loss for a batch of inputs.

    ``unit`` is an int or one unit index per row.  ``offset`` is either a
    shared ``(N,)`` vector, a per-row ``(n, N)`` matrix, or, together with
    ``contexts`` (one row index per input), a ``(C, N)`` embedding table; the
    returned ``d_offset`` has the same shape as ``offset``.
    ``bias_offset`` is added to the bias of each row; its gradient is
    accumulated per context into ``d_context_bias``.

    ``d_input`` holds ``dL/dx`` for each row, zero when the input was clipped.
    Without ``sample_weight`` the loss is the batch mean; ``loss`` holds the
    weighted loss the gradients belong to.
    """
    params.check(cfg)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.atleast_1d(np.asarray(labels, dtype=float))
    n = len(x)
    if t.shape != x.shape:
        raise ValueError("inputs and labels differ in length")
    sw = np.full(n, 1.0 / n) if sample_weight is None else np.asarray(sample_weight, float)
    units = np.broadcast_to(np.asarray(unit, dtype=np.int64), (n,))
    table, ctx, mode = _offset_table(offset, contexts, n, cfg)

    fp = _forward_pass(x, params, cfg, units, table, ctx, bias_offset)
    resid = (expit(fp.z) - t) * sw

    n_pairs, n_buckets = fp.eff.shape
    flat = fp.pair * n_buckets + fp.idx
    at_idx = np.bincount(flat, resid, n_pairs * n_buckets).reshape(n_pairs, n_buckets)
    partial_mass = np.bincount(flat, resid * fp.partial,
                               n_pairs * n_buckets).reshape(n_pairs, n_buckets)
    # rows whose active bucket lies strictly above j see a full-width activation at j
    above = at_idx[:, ::-1].cumsum(axis=1)[:, ::-1] - at_idx
    d_raw = (cfg.bucket_width * above + partial_mass) * fp.gate

    d_weights = np.zeros_like(params.weights)
    np.add.at(d_weights, fp.pair_unit, d_raw)
    d_bias = np.bincount(units, resid, cfg.units).astype(float)

    d_offset = None
    if mode != "none":
        d_offset = np.zeros_like(table)
        np.add.at(d_offset, fp.pair_ctx, d_raw)
        if mode == "shared":
            d_offset = d_offset[0]
    d_context_bias = np.bincount(ctx, resid, len(table)).astype(float)
    d_input = resid * fp.eff[fp.pair, fp.idx] * fp.inside
    loss = bce_from_logits(fp.z, t, sw)
    return GradientBundle(d_weights, d_bias, d_offset, d_input, d_context_bias, loss)


def _batch_loss(x, t, params, cfg, offset=None):
    z = preactivation(x, params, cfg, 0, offset)
    return math.fsum(np.logaddexp(0.0, z) - t * z) / len(x)


def finite_difference_check(params: IsotonicParams, cfg: IsotonicConfig,
                            sample_count: int = 100, seed: int = 0, h: float = 1e-6,
                            offset=None, batch: int = 4, unit: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Draws a small random batch (inputs well inside their buckets, each label
    opposite to the current prediction) and ``sample_count`` random
    coordinates among weights, bias, offset and inputs.  Coordinates within
    ``10*h`` of a ReLU kink are skipped.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    width = cfg.bucket_width
    lo, hi = cfg.lower_bound + width, cfg.upper_bound - width
    x = rng.uniform(lo, hi, batch)
    frac = (x - cfg.lower_bound) / width % 1.0
    nudge = (frac < 0.1) | (frac > 0.9)
    x[nudge] += 0.3 * width
    single = IsotonicParams(params.weights[unit:unit + 1].copy(), params.bias[unit:unit + 1].copy())
    one_unit = IsotonicConfig(cfg.lower_bound, cfg.upper_bound, width, 1, cfg.clip_epsilon)
    offset = None if offset is None else np.asarray(offset, dtype=float).copy()
    # labels opposite the current prediction keep |y - t| >= 0.5; with a
    # saturated output the true gradient would drown in difference roundoff
    t = (preactivation(x, single, one_unit, 0, offset) < 0).astype(float)
    grads = backward(x, t, single, one_unit, 0, offset)

    n_buckets = cfg.num_buckets
    kinds = ["w"] * n_buckets + ["b"] + (["o"] * n_buckets if offset is not None else []) + ["x"] * batch
    worst = 0.0
    for pick in rng.integers(0, len(kinds), sample_count):
        kind = kinds[pick]
        if kind == "w" or kind == "o":
            j = pick if kind == "w" else pick - n_buckets - 1
            raw = single.weights[0, j] + (offset[j] if offset is not None else 0.0)
            if abs(raw) < 10 * h:
                continue
            target = single.weights[0] if kind == "w" else offset
            analytic = grads.d_weights[0, j] if kind == "w" else grads.d_offset[j]
        elif kind == "b":
            target, j, analytic = single.bias, 0, grads.d_bias[0]
        else:
            j = pick - (len(kinds) - batch)
            edge = (x[j] - cfg.lower_bound) / width
            if abs(edge - round(edge)) * width < 10 * h:
                continue
            target, analytic = x, grads.d_input[j]
        keep = target[j]
        target[j] = keep + h
        up = _batch_loss(x, t, single, one_unit, offset)
        target[j] = keep - h
        down = _batch_loss(x, t, single, one_unit, offset)
        target[j] = keep
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(1e-12, abs(numeric)))
    return worst


# --------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict, repr=False)
    second_moment: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """One optimizer update over a dict of named arrays.

    Returns new arrays; ``state`` is updated in place.  Keys absent from
    ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(np.atleast_1d(g)))[:5].tolist()
            raise NumericalError(f"non-finite gradient for {name!r} at {bad} "
                                 f"(step {state.step_count})")
    state.step_count += 1
    out = dict(params)
    lr = state.learning_rate
    if state.kind == "sgd":
        for name, g in grads.items():
            out[name] = params[name] - lr * g
        return out
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step_count
    c2 = 1 - b2 ** state.step_count
    for name, g in grads.items():
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        out[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# --------------------------------------------------------------------------
# training loops

@dataclass
class TrainConfig:
    """Mini-batch settings.  ``schedule="cosine"`` anneals ``lr`` to zero over
    the run; Adam's constant-rate final iterate otherwise keeps wandering by
    about ``lr`` per weight."""

    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-2
    optimizer: str = "adam"
    seed: int = 0
    w_init_factor: float = 0.1
    schedule: str = "cosine"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


SCHEDULES = ("constant", "cosine")


def lr_schedule(kind: str, done: int, total: int) -> float:
    """Multiplier on the base rate before step ``done`` of ``total``."""
    if kind == "constant" or total <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * done / total))


@dataclass
class TrainReport:
    loss_trace: list
    final_loss: float
    epochs_run: int
    seed: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"loss_trace": [float(v) for v in self.loss_trace],
                "final_loss": float(self.final_loss),
                "epochs_run": int(self.epochs_run),
                "seed": int(self.seed),
                **({"extra": self.extra} if self.extra else {})}


def _full_loss(x, t, params, cfg, units):
    table = np.zeros((1, cfg.num_buckets))
    z = _forward_pass(x, params, cfg, units, table, np.zeros(len(x), np.int64), 0.0).z
    return bce_from_logits(z, t)


def train_layer(x, labels, cfg: IsotonicConfig, hp: TrainConfig, units=None,
                init: IsotonicParams | None = None):
    """Mini-batch training of a layer on raw logits ``x`` and binary labels.

    ``units`` optionally routes each row to one unit of a multi-unit layer.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(labels, dtype=float)
    if x.size == 0:
        raise ValueError("cannot train on an empty dataset")
    units = np.zeros(len(x), dtype=np.int64) if units is None else np.asarray(units, np.int64)
    params = init.copy() if init is not None else IsotonicParams.initial(cfg, hp.w_init_factor)
    params.check(cfg)
    rng = np.random.default_rng(hp.seed)
    state = OptimizerState(kind=hp.optimizer, learning_rate=hp.lr)
    trace = []
    total = hp.epochs * -(-len(x) // hp.batch_size)
    done = 0
    for epoch in range(hp.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), hp.batch_size):
            rows = order[start:start + hp.batch_size]
            state.learning_rate = hp.lr * lr_schedule(hp.schedule, done, total)
            done += 1
            g = backward(x[rows], t[rows], params, cfg, units[rows])
            new = step({"weights": params.weights, "bias": params.bias},
                       {"weights": g.d_weights, "bias": g.d_bias}, state)
            params = IsotonicParams(new["weights"], new["bias"])
        loss = _full_loss(x, t, params, cfg, units)
        if not math.isfinite(loss):
            raise NumericalError(f"loss diverged at epoch {epoch}")
        trace.append(loss)
        log.debug("epoch %d loss %.6f", epoch, loss)
    final = trace[-1] if trace else _full_loss(x, t, params, cfg, units)
    return params, TrainReport(trace, final, hp.epochs, hp.seed)


def fit(dataset, cfg: IsotonicConfig, hp: TrainConfig | None = None):
    """Train a layer on a :class:`~isolayer.bias_sim.LabeledDataset`.

    Rows use ``dataset.input`` as the logit.  For a multi-unit config the
    distinct task ids (sorted) are mapped onto units in order.
    """
    hp = hp or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("cannot fit an empty dataset")
    units = None
    extra = {}
    if cfg.units > 1:
        tasks = sorted(set(dataset.task_id.tolist()))
        if len(tasks) > cfg.units:
            raise ConfigError(f"{len(tasks)} tasks but only {cfg.units} units")
        lookup = {task: u for u, task in enumerate(tasks)}
        units = np.array([lookup[task] for task in dataset.task_id])
        extra["task_units"] = lookup
    params, report = train_layer(dataset.input, dataset.label, cfg, hp, units)
    report.extra.update(extra)
    return params, report


@dataclass
class CalibrationResult:
    params: dict
    reports: dict
    fallbacks: list


def calibrate_frozen(upstream_scores, labels, contexts, cfg: IsotonicConfig,
                     hp: TrainConfig | None = None, expected_contexts=None) -> CalibrationResult:
    """Fit one independent layer per context on frozen upstream probabilities.

    Scores are mapped to logits before bucketing.  Contexts listed in
    ``expected_contexts`` that have no rows get identity parameters and are
    listed in ``fallbacks``.
    """
    hp = hp or TrainConfig()
    if cfg.units != 1:
        raise ConfigError("calibration layers are single-unit")
    scores = np.asarray(upstream_scores, dtype=float)
    if np.any((scores <= 0) | (scores >= 1)):
        raise ValueError("upstream scores must lie strictly inside (0, 1)")
    x = logit(scores)
    t = np.asarray(labels, dtype=float)
    ctx = np.asarray(contexts).astype(str)
    names = sorted(set(ctx.tolist()) | {str(c) for c in (expected_contexts or ())})
    params, reports, fallbacks = {}, {}, []
    for name in names:
        rows = ctx == name
        if not rows.any():
            log.warning("context %r has no samples; using identity calibration", name)
            params[name] = IsotonicParams.identity(cfg)
            fallbacks.append(name)
            continue
        params[name], reports[name] = train_layer(x[rows], t[rows], cfg, hp)
    return CalibrationResult(params, reports, fallbacks)
