"""Context-conditioned isotonic calibration.

Each context (display position, platform, advertiser, or a tuple of those
encoded as one key) owns a row of bucket-weight offsets.  In the default
``additive`` mode the effective weights are ``relu(w + E[c])``, so a zero row
reproduces the shared base curve.  ``replace`` mode uses ``relu(E[c])`` on
its own; there the reference context always resolves to the base weights.

The reference context is the row used for bias-neutral scoring.  By default
it is a dedicated id whose row is zero and never trained.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import IsotonicConfig, IsotonicParams, forward, preactivation
from .training import (NumericalError, OptimizerState, TrainConfig, TrainReport, lr_schedule,
                       backward, bce_from_logits, step)

log = logging.getLogger(__name__)

REFERENCE = "__reference__"
MODES = ("additive", "replace")

__all__ = ["EmbeddingTable", "Lookup", "REFERENCE", "bypass_forward", "composite_key",
           "conditioned_backward", "conditioned_forward", "conditioned_preactivation",
           "fit_conditioned", "lookup", "neutralized_forward"]


def composite_key(*parts) -> str:
    """Join several context fields into one vocabulary key, e.g. ``"1|desktop"``."""
    return "|".join(str(p) for p in parts)


@dataclass
class EmbeddingTable:
    """Per-context weight offsets ``rows[k]`` for ``vocabulary[k]``.

    ``context_bias`` is ``None`` unless per-context biases are enabled.
    """

    vocabulary: list
    rows: np.ndarray
    context_bias: np.ndarray | None = None
    reference_context: str = REFERENCE
    mode: str = "additive"
    frozen_reference: bool = True

    def __post_init__(self):
        self.vocabulary = [str(c) for c in self.vocabulary]
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("duplicate context ids")
        if self.rows.shape[0] != len(self.vocabulary):
            raise ValueError("one row per context is required")
        if self.reference_context not in self.vocabulary:
            raise ValueError(f"reference context {self.reference_context!r} not in vocabulary")
        if self.context_bias is not None:
            self.context_bias = np.asarray(self.context_bias, dtype=float)
            if self.context_bias.shape != (len(self.vocabulary),):
                raise ValueError("context_bias needs one entry per context")
        self._index = {c: k for k, c in enumerate(self.vocabulary)}

    @classmethod
    def zeros(cls, contexts, cfg: IsotonicConfig, reference=REFERENCE,
              context_bias=False, mode="additive", base: IsotonicParams | None = None):
        """Neutral table over ``contexts`` (the reference id is added if missing).

        In ``replace`` mode rows start as copies of ``base`` unit 0 so the
        initial curves still equal the base curve.
        """
        vocab = [str(reference)] + sorted({str(c) for c in contexts} - {str(reference)})
        rows = np.zeros((len(vocab), cfg.num_buckets))
        if mode == "replace":
            if base is None:
                raise ValueError("replace mode needs base params to initialise rows")
            rows[:] = base.weights[0]
        bias = np.zeros(len(vocab)) if context_bias else None
        return cls(vocab, rows, bias, str(reference), mode)

    @property
    def num_contexts(self) -> int:
        return len(self.vocabulary)

    @property
    def reference_index(self) -> int:
        return self._index[self.reference_context]

    def indices(self, contexts):
        """Row index per context id and a mask of out-of-vocabulary ids."""
        ctx = np.atleast_1d(np.asarray(contexts).astype(str))
        ref = self.reference_index
        idx = np.fromiter((self._index.get(c, -1) for c in ctx), dtype=np.int64, count=len(ctx))
        oov = idx < 0
        if oov.any():
            log.info("%d out-of-vocabulary contexts mapped to %r",
                     int(oov.sum()), self.reference_context)
        idx[oov] = ref
        return idx, oov

    def copy(self) -> "EmbeddingTable":
        bias = None if self.context_bias is None else self.context_bias.copy()
        return EmbeddingTable(list(self.vocabulary), self.rows.copy(), bias,
                              self.reference_context, self.mode, self.frozen_reference)


@dataclass(frozen=True)
class Lookup:
    row: np.ndarray
    bias: float
    index: int
    oov: bool


def lookup(c, table: EmbeddingTable) -> Lookup:
    """Offset row and bias for one context; unknown ids fall back to the reference."""
    idx, oov = table.indices([c])
    k = int(idx[0])
    bias = 0.0 if table.context_bias is None else float(table.context_bias[k])
    return Lookup(table.rows[k], bias, k, bool(oov[0]))


def _resolve(params, table, idx, unit):
    """Per-row weight offsets (relative to ``params.weights[unit]``) and biases."""
    offsets = table.rows[idx]
    if table.mode == "replace":
        # relu(E[c]) == relu(w + (E[c] - w)); the reference row means "use w"
        offsets = offsets - params.weights[unit]
        offsets[idx == table.reference_index] = 0.0
    bias = 0.0 if table.context_bias is None else table.context_bias[idx]
    return offsets, bias


def conditioned_preactivation(x, params, cfg, contexts, table, unit=0):
    """``z`` under each row's context; ``contexts`` is one id or one per input."""
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ctx = np.broadcast_to(np.asarray(contexts, dtype=object), x.shape)
    idx, _ = table.indices(ctx)
    uniq = np.unique(idx)
    z = np.empty(len(x))
    # one shared offset per distinct context keeps the exact-monotone path
    for k in uniq:
        rows = idx == k
        off, bias = _resolve(params, table, np.array([k]), unit)
        z[rows] = preactivation(x[rows], params, cfg, unit, off[0],
                                bias if np.ndim(bias) == 0 else bias[0])
    return float(z[0]) if scalar else z


def conditioned_forward(x, params: IsotonicParams, cfg: IsotonicConfig, c,
                        table: EmbeddingTable, unit: int = 0):
    """Probability with context-specific effective weights and bias."""
    z = conditioned_preactivation(x, params, cfg, c, table, unit)
    return float(expit(z)) if np.ndim(z) == 0 else expit(z)


def neutralized_forward(x, params: IsotonicParams, cfg: IsotonicConfig,
                        table: EmbeddingTable, unit: int = 0):
    """Score every input under the reference context, whatever it was logged with."""
    return conditioned_forward(x, params, cfg, table.reference_context, table, unit)


def bypass_forward(x, params: IsotonicParams, cfg: IsotonicConfig, unit: int = 0):
    """Score with the base curve alone, skipping the table entirely."""
    return forward(x, params, cfg, unit)


def conditioned_backward(x, labels, params: IsotonicParams, cfg: IsotonicConfig,
                         contexts, table: EmbeddingTable, unit=0, sample_weight=None):
    """Gradients for base params, table rows and context biases.

    ``d_offset`` of the returned bundle has the table's shape; only rows of
    contexts present in the batch are non-zero, and the reference row stays
    zero while it is frozen.
    """
    idx, _ = table.indices(contexts)
    ref = table.reference_index
    offsets = table.rows
    if table.mode == "replace":
        offsets = table.rows - params.weights[unit]
        offsets[ref] = 0.0
    bias = 0.0 if table.context_bias is None else table.context_bias[idx]
    g = backward(x, labels, params, cfg, unit, offsets, idx, sample_weight, bias)
    if table.mode == "replace":
        # offsets = E - w, so the w-path through non-reference rows cancels
        moved = np.ones(len(table.rows), dtype=bool)
        moved[ref] = False
        g.d_weights[unit] -= g.d_offset[moved].sum(axis=0)
        g.d_offset[ref] = 0.0
    if table.frozen_reference:
        g.d_offset[ref] = 0.0
        g.d_context_bias[ref] = 0.0
    if table.context_bias is None:
        g.d_context_bias = None
    return g


def fit_conditioned(x, labels, contexts, cfg: IsotonicConfig, hp=None,
                    params: IsotonicParams | None = None,
                    table: EmbeddingTable | None = None):
    """Jointly train base weights, per-context rows and optional context biases.

    Returns ``(params, table, report)``.  A fresh table over the observed
    contexts is created when none is passed.
    """
    hp = hp or TrainConfig()
    x = np.asarray(x, dtype=float)
    t = np.asarray(labels, dtype=float)
    ctx = np.asarray(contexts).astype(str)
    if x.size == 0:
        raise ValueError("cannot train on an empty dataset")
    params = (params or IsotonicParams.initial(cfg, hp.w_init_factor)).copy()
    table = (table or EmbeddingTable.zeros(set(ctx.tolist()), cfg, base=params)).copy()
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
            g = conditioned_backward(x[rows], t[rows], params, cfg, ctx[rows], table)
            cur = {"weights": params.weights, "bias": params.bias, "rows": table.rows}
            grads = {"weights": g.d_weights, "bias": g.d_bias, "rows": g.d_offset}
            if table.context_bias is not None:
                cur["context_bias"] = table.context_bias
                grads["context_bias"] = g.d_context_bias
            new = step(cur, grads, state)
            params = IsotonicParams(new["weights"], new["bias"])
            table.rows = new["rows"]
            if table.context_bias is not None:
                table.context_bias = new["context_bias"]
        loss = bce_from_logits(conditioned_preactivation(x, params, cfg, ctx, table), t)
        if not np.isfinite(loss):
            raise NumericalError(f"loss diverged at epoch {epoch}")
        trace.append(loss)
    final = trace[-1] if trace else bce_from_logits(
        conditioned_preactivation(x, params, cfg, ctx, table), t)
    return params, table, TrainReport(trace, final, hp.epochs, hp.seed)
