"""Dual-head debiasing model.

A small relevance network maps item features to one logit ``r`` per task.
Two heads read that logit:

* the inference head ``sigmoid(r)``, which never sees the display context and
  is the only path used for serving;
* the isotonic head ``f_iso(r; c)``, an isotonic layer conditioned on the
  display context ``c`` (position, platform, ...) through an embedding table.

Training minimises ``sum_s alpha_s * BCE(inf_s) + beta_s * BCE(iso_s)``.  The
isotonic head can absorb any monotone, context-specific distortion of ``r``,
so context effects need not be pushed into the relevance network.

All gradients are written out by hand; see :func:`joint_gradients`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .context import (EmbeddingTable, conditioned_backward, conditioned_forward,
                      conditioned_preactivation)
from .core import ConfigError, IsotonicConfig, IsotonicParams
from .training import (SCHEDULES, NumericalError, OptimizerState, TrainReport, bce_from_logits,
                       lr_schedule, step)

log = logging.getLogger(__name__)

__all__ = ["DualTowerModel", "DualTrainConfig", "IsoHead", "RelevanceTower",
           "infer_relevance", "inference_head", "isotonic_head", "joint_gradients",
           "joint_loss", "neutralized_head", "tower_forward", "train_dual_tower"]

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda pre, out: 1.0 - out * out),
    "softplus": (lambda v: np.logaddexp(0.0, v), lambda pre, out: expit(pre)),
    "identity": (lambda v: v, lambda pre, out: np.ones_like(pre)),
}


@dataclass
class RelevanceTower:
    """Fully connected network; hidden layers use ``activation``, the output is linear."""

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("tower needs matching, non-empty weight and bias lists")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise ConfigError(f"layer {k} input width does not match layer {k - 1}")

    @classmethod
    def create(cls, input_dim: int, outputs: int = 1, hidden=(16, 16),
               activation: str = "tanh", seed: int = 0) -> "RelevanceTower":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        sizes = [input_dim, *hidden, outputs]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def outputs(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "RelevanceTower":
        return RelevanceTower([w.copy() for w in self.weights],
                              [b.copy() for b in self.biases], self.activation)


def _tower_pass(features, tower):
    h = np.asarray(features, dtype=float)
    if h.ndim != 2 or h.shape[1] != tower.input_dim:
        raise ConfigError(f"features of shape {h.shape} do not fit a tower with "
                          f"input width {tower.input_dim}")
    act = _ACTIVATIONS[tower.activation][0]
    cache = [(None, h)]
    last = len(tower.weights) - 1
    with np.errstate(over="ignore", invalid="ignore"):
        for k, (w, b) in enumerate(zip(tower.weights, tower.biases)):
            pre = h @ w + b
            h = pre if k == last else act(pre)
            cache.append((pre, h))
    if not np.all(np.isfinite(h)):
        raise NumericalError("relevance tower produced non-finite logits")
    return h, cache


def tower_forward(features, tower: RelevanceTower, task: int | None = None):
    """Relevance logits, ``(n, outputs)``, or the column for one task index."""
    out, _ = _tower_pass(features, tower)
    return out if task is None else out[:, task]


@dataclass
class IsoHead:
    params: IsotonicParams
    table: EmbeddingTable

    def copy(self) -> "IsoHead":
        return IsoHead(self.params.copy(), self.table.copy())


@dataclass
class DualTowerModel:
    """Relevance tower plus one context-conditioned isotonic head per task.

    ``loss_weights[task] = (alpha, beta)`` weigh the inference-head and
    isotonic-head BCE terms.  With ``inference_affine`` the inference head is
    ``sigmoid(scale * r + shift)`` instead of ``sigmoid(r)``.
    """

    tower: RelevanceTower
    tasks: list
    heads: dict
    loss_weights: dict
    config: IsotonicConfig
    inference_affine: dict | None = None

    def __post_init__(self):
        self.tasks = [str(t) for t in self.tasks]
        if self.tower.outputs != len(self.tasks):
            raise ConfigError("tower outputs must equal the number of tasks")
        for task in self.tasks:
            if task not in self.heads:
                raise ConfigError(f"no isotonic head for task {task!r}")
            alpha, beta = self.loss_weights[task]
            if alpha < 0 or beta < 0 or alpha == beta == 0:
                raise ConfigError(f"task {task!r}: loss weights must be >= 0 and not both 0")
            self.heads[task].params.check(self.config)
        if self.config.units != 1:
            raise ConfigError("isotonic heads are single-unit layers")

    @classmethod
    def create(cls, feature_dim: int, tasks, contexts, cfg: IsotonicConfig | None = None,
               hidden=(16, 16), activation="tanh", alpha=1.0, beta=0.75, seed=0,
               context_bias=False, inference_affine=False) -> "DualTowerModel":
        """Fresh model whose isotonic heads start as the identity: ``iso == inf``."""
        cfg = cfg or IsotonicConfig()
        tasks = [str(t) for t in tasks]
        tower = RelevanceTower.create(feature_dim, len(tasks), hidden, activation, seed)
        heads = {t: IsoHead(IsotonicParams.identity(cfg),
                            EmbeddingTable.zeros(contexts, cfg, context_bias=context_bias))
                 for t in tasks}
        weights = {t: (float(alpha), float(beta)) for t in tasks}
        affine = {t: np.array([1.0, 0.0]) for t in tasks} if inference_affine else None
        return cls(tower, tasks, heads, weights, cfg, affine)

    def task_index(self, task) -> int:
        try:
            return self.tasks.index(str(task))
        except ValueError:
            raise ConfigError(f"unknown task {task!r}") from None

    def copy(self) -> "DualTowerModel":
        affine = None if self.inference_affine is None else {
            t: v.copy() for t, v in self.inference_affine.items()}
        return DualTowerModel(self.tower.copy(), list(self.tasks),
                              {t: h.copy() for t, h in self.heads.items()},
                              dict(self.loss_weights), self.config, affine)

    # flat parameter view for the optimizer -------------------------------
    def get_params(self) -> dict:
        out = {}
        for k, (w, b) in enumerate(zip(self.tower.weights, self.tower.biases)):
            out[f"tower.w{k}"] = w
            out[f"tower.b{k}"] = b
        for task, head in self.heads.items():
            out[f"iso.{task}.weights"] = head.params.weights
            out[f"iso.{task}.bias"] = head.params.bias
            out[f"iso.{task}.rows"] = head.table.rows
            if head.table.context_bias is not None:
                out[f"iso.{task}.context_bias"] = head.table.context_bias
        if self.inference_affine is not None:
            for task, v in self.inference_affine.items():
                out[f"inf.{task}.affine"] = v
        return out

    def set_params(self, values: dict) -> None:
        for k in range(len(self.tower.weights)):
            self.tower.weights[k] = values[f"tower.w{k}"]
            self.tower.biases[k] = values[f"tower.b{k}"]
        for task, head in self.heads.items():
            head.params = IsotonicParams(values[f"iso.{task}.weights"], values[f"iso.{task}.bias"])
            head.table.rows = values[f"iso.{task}.rows"]
            if head.table.context_bias is not None:
                head.table.context_bias = values[f"iso.{task}.context_bias"]
        if self.inference_affine is not None:
            for task in self.inference_affine:
                self.inference_affine[task] = values[f"inf.{task}.affine"]


def _inference_logit(r, model, task):
    if model.inference_affine is None:
        return r
    scale, shift = model.inference_affine[task]
    return scale * r + shift


def inference_head(features, model: DualTowerModel, task) -> np.ndarray:
    """Context-free probability used for serving."""
    task = str(task)
    r = tower_forward(features, model.tower, model.task_index(task))
    return expit(_inference_logit(r, model, task))


infer_relevance = inference_head


def isotonic_head(features, contexts, model: DualTowerModel, task) -> np.ndarray:
    """Context-aware probability ``f_iso(r; c)``; monotone in ``r`` for each ``c``."""
    task = str(task)
    r = tower_forward(features, model.tower, model.task_index(task))
    head = model.heads[task]
    return conditioned_forward(r, head.params, model.config, contexts, head.table)


def neutralized_head(features, model: DualTowerModel, task) -> np.ndarray:
    """Isotonic head evaluated at the reference context for every row."""
    task = str(task)
    head = model.heads[task]
    return isotonic_head(features, head.table.reference_context, model, task)


# ---------------------------------------------------------------------------
# loss and gradients

def _task_rows(batch, model):
    ids = np.asarray(batch.task_id).astype(str)
    rows = {t: np.flatnonzero(ids == t) for t in model.tasks}
    if not any(len(v) for v in rows.values()):
        raise ValueError("batch has no rows for any of the model's tasks")
    return rows


def joint_loss(batch, model: DualTowerModel) -> float:
    """Weighted sum of per-task mean BCE of both heads; rows of other tasks are ignored."""
    rows_by_task = _task_rows(batch, model)
    r_all = tower_forward(batch.features, model.tower)
    total = 0.0
    for task, rows in rows_by_task.items():
        if not len(rows):
            continue
        alpha, beta = model.loss_weights[task]
        r = r_all[rows, model.task_index(task)]
        t = batch.label[rows]
        if alpha:
            total += alpha * bce_from_logits(_inference_logit(r, model, task), t)
        if beta:
            head = model.heads[task]
            z = conditioned_preactivation(r, head.params, model.config,
                                          batch.context_id[rows], head.table)
            total += beta * bce_from_logits(z, t)
    return total


def joint_gradients(batch, model: DualTowerModel):
    """Loss and gradient for every entry of :meth:`DualTowerModel.get_params`.

    The relevance logit receives gradient from both heads; through the
    isotonic head it is the effective weight of the active bucket.
    """
    rows_by_task = _task_rows(batch, model)
    r_all, cache = _tower_pass(batch.features, model.tower)
    d_out = np.zeros_like(r_all)
    grads = {}
    total = 0.0
    for task, rows in rows_by_task.items():
        head = model.heads[task]
        col = model.task_index(task)
        alpha, beta = model.loss_weights[task]
        zero_head = {f"iso.{task}.weights": np.zeros_like(head.params.weights),
                     f"iso.{task}.bias": np.zeros_like(head.params.bias),
                     f"iso.{task}.rows": np.zeros_like(head.table.rows)}
        if head.table.context_bias is not None:
            zero_head[f"iso.{task}.context_bias"] = np.zeros_like(head.table.context_bias)
        grads.update(zero_head)
        if model.inference_affine is not None:
            grads[f"inf.{task}.affine"] = np.zeros(2)
        n = len(rows)
        if not n:
            continue
        r = r_all[rows, col]
        t = batch.label[rows]
        if alpha:
            z = _inference_logit(r, model, task)
            total += alpha * bce_from_logits(z, t)
            resid = (expit(z) - t) * (alpha / n)
            if model.inference_affine is None:
                d_out[rows, col] += resid
            else:
                scale = model.inference_affine[task][0]
                d_out[rows, col] += resid * scale
                grads[f"inf.{task}.affine"] = np.array([np.dot(resid, r), resid.sum()])
        if beta:
            g = conditioned_backward(r, t, head.params, model.config,
                                     batch.context_id[rows], head.table,
                                     sample_weight=np.full(n, beta / n))
            total += g.loss
            d_out[rows, col] += g.d_input
            grads[f"iso.{task}.weights"] = g.d_weights
            grads[f"iso.{task}.bias"] = g.d_bias
            grads[f"iso.{task}.rows"] = g.d_offset
            if g.d_context_bias is not None:
                grads[f"iso.{task}.context_bias"] = g.d_context_bias

    deriv = _ACTIVATIONS[model.tower.activation][1]
    delta = d_out
    for k in range(len(model.tower.weights) - 1, -1, -1):
        h_in = cache[k][1]
        grads[f"tower.w{k}"] = h_in.T @ delta
        grads[f"tower.b{k}"] = delta.sum(axis=0)
        if k:
            pre, out = cache[k]
            delta = (delta @ model.tower.weights[k].T) * deriv(pre, out)
    return total, grads


# ---------------------------------------------------------------------------
# training

@dataclass
class DualTrainConfig:
    """``iso_lr`` drives the isotonic heads.

    Adam moves every bucket weight below an input by about ``lr`` per step,
    which shifts the curve there by roughly ``(x - L) * lr`` logits at once,
    so the heads want a much smaller step than the tower.  ``schedule`` is
    ``"constant"`` or ``"cosine"``; the cosine schedule anneals both rates to
    zero by the last step, which quiets the final iterate.
    """

    epochs: int = 20
    batch_size: int = 512
    lr: float = 5e-3
    iso_lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.iso_lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and positive rates required")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def train_dual_tower(dataset, model: DualTowerModel, hp: DualTrainConfig | None = None):
    """Mini-batch joint training; returns a trained copy and a report.

    The loss trace holds the full-dataset joint loss after each epoch.
    """
    hp = hp or DualTrainConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    rng = np.random.default_rng(hp.seed)
    tower_state = OptimizerState(kind=hp.optimizer, learning_rate=hp.lr)
    iso_state = OptimizerState(kind=hp.optimizer, learning_rate=hp.iso_lr)
    trace = []
    total = hp.epochs * -(-len(dataset) // hp.batch_size)
    done = 0
    for epoch in range(hp.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), hp.batch_size):
            batch = dataset.subset(order[start:start + hp.batch_size])
            factor = lr_schedule(hp.schedule, done, total)
            tower_state.learning_rate = hp.lr * factor
            iso_state.learning_rate = hp.iso_lr * factor
            done += 1
            try:
                loss, grads = joint_gradients(batch, model)
            except ValueError:
                continue  # batch with no known task
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite joint loss at epoch {epoch}")
            current = model.get_params()
            iso = {k: g for k, g in grads.items() if k.startswith("iso.")}
            rest = {k: g for k, g in grads.items() if not k.startswith("iso.")}
            current = step(current, rest, tower_state)
            model.set_params(step(current, iso, iso_state))
        loss = joint_loss(dataset, model)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite joint loss after epoch {epoch}")
        trace.append(loss)
        log.debug("epoch %d joint loss %.6f", epoch, loss)
    final = trace[-1] if trace else joint_loss(dataset, model)
    return model, TrainReport(trace, final, hp.epochs, hp.seed)
