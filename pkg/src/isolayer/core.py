"""Forward pass of the isotonic layer.

The layer clips a scalar logit to ``[L, U]``, splits that range into fixed
buckets of width ``bucket_width``, and sums the bucket activations against
ReLU-constrained weights::

    z(x) = sum_j a_j(x) * relu(w_j + offset_j) + residue + b
    y(x) = sigmoid(z(x))

with ``residue = L - bucket_width``.  Because every activation is
non-decreasing in ``x`` and every effective weight is non-negative, ``y`` is
non-decreasing in ``x`` for any parameter values.

Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

__all__ = [
    "ActivationVector",
    "ConfigError",
    "CorruptInputError",
    "IsotonicConfig",
    "IsotonicParams",
    "activation_matrix",
    "activation_vector",
    "bucket_index",
    "clip_input",
    "effective_weights",
    "forward",
    "num_buckets",
    "preactivation",
]

# rows per chunk when materialising activation matrices
_CHUNK = 4096


class ConfigError(ValueError):
    """Invalid layer configuration or parameter shape."""


class CorruptInputError(ValueError):
    """Input logits contain NaN or infinity."""


@dataclass(frozen=True)
class IsotonicConfig:
    """Bucket geometry shared by every layer instance.

    The defaults are the bounds and bucket width used for CTR-style logits.
    A coarser ``bucket_width=0.2`` (126 buckets) is the other common choice.
    """

    lower_bound: float = -17.0
    upper_bound: float = 8.0
    bucket_width: float = 0.05
    units: int = 1
    clip_epsilon: float = 1e-9

    def __post_init__(self):
        lb, ub, width, eps = (self.lower_bound, self.upper_bound,
                              self.bucket_width, self.clip_epsilon)
        if not all(math.isfinite(v) for v in (lb, ub, width, eps)):
            raise ConfigError("config values must be finite")
        if not lb < ub:
            raise ConfigError(f"lower_bound {lb} must be < upper_bound {ub}")
        if not width > 0:
            raise ConfigError("bucket_width must be positive")
        if not 0 < eps < width:
            raise ConfigError("clip_epsilon must lie in (0, bucket_width)")
        if int(self.units) != self.units or self.units < 1:
            raise ConfigError("units must be a positive integer")

    @property
    def num_buckets(self) -> int:
        return num_buckets(self)

    @property
    def residue(self) -> float:
        return self.lower_bound - self.bucket_width

    def to_dict(self) -> dict:
        return {
            "lower_bound": float(self.lower_bound),
            "upper_bound": float(self.upper_bound),
            "bucket_width": float(self.bucket_width),
            "units": int(self.units),
            "clip_epsilon": float(self.clip_epsilon),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsotonicConfig":
        return cls(**{k: d[k] for k in
                      ("lower_bound", "upper_bound", "bucket_width", "units",
                       "clip_epsilon") if k in d})


@dataclass
class IsotonicParams:
    """Learnable weights ``(units, N)`` and biases ``(units,)`` of one layer.

    The residue offset is not stored; it is always ``cfg.residue``.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        self.bias = np.atleast_1d(np.asarray(self.bias, dtype=float))

    @classmethod
    def initial(cls, cfg: IsotonicConfig, w_init_factor: float = 0.1) -> "IsotonicParams":
        return cls(np.full((cfg.units, cfg.num_buckets), float(w_init_factor)),
                   np.zeros(cfg.units))

    @classmethod
    def identity(cls, cfg: IsotonicConfig) -> "IsotonicParams":
        """Unit weights and zero bias: ``z(x)`` equals the clipped input."""
        return cls.initial(cfg, 1.0)

    def check(self, cfg: IsotonicConfig) -> None:
        expected = (cfg.units, cfg.num_buckets)
        if self.weights.shape != expected:
            raise ConfigError(f"weights shape {self.weights.shape} != {expected}")
        if self.bias.shape != (cfg.units,):
            raise ConfigError(f"bias shape {self.bias.shape} != ({cfg.units},)")

    def copy(self) -> "IsotonicParams":
        return IsotonicParams(self.weights.copy(), self.bias.copy())


@dataclass(frozen=True)
class ActivationVector:
    values: np.ndarray = field(repr=False)
    source_input: float
    index: int


def num_buckets(cfg: IsotonicConfig) -> int:
    ratio = (cfg.upper_bound - cfg.lower_bound) / cfg.bucket_width
    # (8 - -17) / 0.05 may land a hair above 500 in binary floating point
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9 * max(1.0, abs(ratio)):
        ratio = nearest
    return int(math.ceil(ratio)) + 1


def clip_input(x, cfg: IsotonicConfig):
    """Clip logits into ``[L + eps, U - eps]``.

    Scalars come back as ``float``, arrays as float arrays.  NaN or infinite
    input raises :class:`CorruptInputError`.
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise CorruptInputError("non-finite input logit")
    out = np.clip(arr, cfg.lower_bound + cfg.clip_epsilon,
                  cfg.upper_bound - cfg.clip_epsilon)
    return float(out) if out.ndim == 0 else out


def _shifted(xt, cfg):
    # distance from the residue; identical expression everywhere so that the
    # bucket index and the partial activation agree bit for bit
    return (np.asarray(xt, dtype=float) - cfg.lower_bound) + cfg.bucket_width


def bucket_index(xt, cfg: IsotonicConfig):
    idx = np.floor(_shifted(xt, cfg) / cfg.bucket_width)
    idx = np.clip(idx, 0, cfg.num_buckets - 1).astype(np.int64)
    return int(idx) if idx.ndim == 0 else idx


def _partial(shifted, idx, cfg):
    part = shifted - idx * cfg.bucket_width
    # rounding can push the partial a few ulps outside [0, width]; keeping it
    # inside is what makes a(x1) <= a(x2) hold exactly across bucket edges
    return np.clip(part, 0.0, cfg.bucket_width)


def activation_matrix(xt, cfg: IsotonicConfig) -> np.ndarray:
    """Activation vectors for a batch of clipped inputs, shape ``(n, N)``."""
    xt = np.atleast_1d(np.asarray(xt, dtype=float))
    shifted = _shifted(xt, cfg)
    idx = bucket_index(xt, cfg)
    idx = np.atleast_1d(idx)
    cols = np.arange(cfg.num_buckets)
    act = np.where(cols[None, :] < idx[:, None], cfg.bucket_width, 0.0)
    act[np.arange(len(xt)), idx] = _partial(shifted, idx, cfg)
    return act


def activation_vector(xt: float, cfg: IsotonicConfig) -> ActivationVector:
    xt = float(xt)
    return ActivationVector(activation_matrix([xt], cfg)[0], xt, bucket_index(xt, cfg))


def effective_weights(params: IsotonicParams, unit: int = 0, offset=None) -> np.ndarray:
    """``relu(w + offset)`` for one unit; ``offset`` may be ``(N,)`` or ``(n, N)``."""
    w = params.weights[unit]
    if offset is not None:
        w = w + np.asarray(offset, dtype=float)
    return np.maximum(w, 0.0)


def _resolve_unit(params, cfg, unit):
    params.check(cfg)
    if not 0 <= unit < cfg.units:
        raise ConfigError(f"unit {unit} out of range for {cfg.units} units")


def _check_offset(offset, cfg, n):
    if offset is None:
        return None
    offset = np.asarray(offset, dtype=float)
    if offset.shape not in ((cfg.num_buckets,), (n, cfg.num_buckets)):
        raise ConfigError(f"offset shape {offset.shape} incompatible with "
                          f"{n} inputs and {cfg.num_buckets} buckets")
    return offset


def _aggregate(xt, eff, bias, cfg):
    # elementwise product + row sum, never a BLAS dot: every row is reduced
    # with the same summation order, which keeps z exactly monotone
    n = len(xt)
    z = np.empty(n)
    per_row = eff.ndim == 2
    bias = np.broadcast_to(np.asarray(bias, dtype=float), (n,))
    for start in range(0, n, _CHUNK):
        sl = slice(start, start + _CHUNK)
        act = activation_matrix(xt[sl], cfg)
        w = eff[sl] if per_row else eff
        z[sl] = (act * w).sum(axis=1) + cfg.residue + bias[sl]
    return z


def preactivation(x, params: IsotonicParams, cfg: IsotonicConfig, unit: int = 0,
                  offset=None, bias_offset=0.0):
    """Pre-sigmoid output ``z(x)`` for one unit.

    ``offset`` is added to the raw weights before the ReLU, either one vector
    for all inputs or one row per input.  ``bias_offset`` is added to the bias.
    """
    _resolve_unit(params, cfg, unit)
    scalar = np.ndim(x) == 0
    xt = np.atleast_1d(clip_input(x, cfg))
    offset = _check_offset(offset, cfg, len(xt))
    eff = effective_weights(params, unit, offset)
    z = _aggregate(xt, eff, params.bias[unit] + np.asarray(bias_offset, dtype=float), cfg)
    return float(z[0]) if scalar else z


def forward(x, params: IsotonicParams, cfg: IsotonicConfig, unit: int | None = 0,
            offset=None, bias_offset=0.0):
    """Probability output of the layer.

    With ``unit=None`` a scalar or 1-d input is broadcast across every unit and
    the result has shape ``(n, units)``.
    """
    if unit is None:
        cols = [np.atleast_1d(preactivation(x, params, cfg, u, offset, bias_offset))
                for u in range(cfg.units)]
        out = expit(np.stack(cols, axis=1))
        return out[0] if np.ndim(x) == 0 else out
    z = preactivation(x, params, cfg, unit, offset, bias_offset)
    return float(expit(z)) if np.ndim(z) == 0 else expit(z)
