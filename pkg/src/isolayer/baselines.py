"""Classical calibrators: pool-adjacent-violators and Platt scaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = ["PlattParams", "StepFunction", "pava_fit", "pava_predict",
           "platt_fit", "platt_predict"]


@dataclass
class StepFunction:
    """Right-continuous staircase: ``levels[k]`` holds on ``[breakpoints[k], breakpoints[k+1])``.

    ``weights`` keeps the pooled sample weight of every breakpoint so a fit
    can be refitted (or merged) without the original data.
    """

    breakpoints: np.ndarray
    levels: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.breakpoints = np.asarray(self.breakpoints, dtype=float)
        self.levels = np.asarray(self.levels, dtype=float)
        if self.weights is None:
            self.weights = np.ones_like(self.levels)
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(np.diff(self.levels) < 0):
            raise ValueError("levels must be non-decreasing")

    def __call__(self, x):
        return pava_predict(self, x)


def _pool(y, w):
    # classic stack of blocks, each kept as (mean, weight, length); storing the
    # mean rather than w*y leaves unpooled points bit-exact, so a refit of a
    # fitted staircase returns it unchanged
    means, wts, lens = [], [], []
    for m, c in zip(y, w):
        n = 1
        while means and means[-1] > m:
            pm, pc = means.pop(), wts.pop()
            m = (pm * pc + m * c) / (pc + c)
            c += pc
            n += lens.pop()
        means.append(m)
        wts.append(c)
        lens.append(n)
    return np.repeat(np.array(means), lens)


def pava_fit(xs, ys, weights=None) -> StepFunction:
    """Weighted least-squares non-decreasing fit of ``ys`` against sorted ``xs``.

    Tied ``xs`` are merged into one point carrying their weighted mean and
    total weight before pooling.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size == 0:
        raise ValueError("pava_fit needs at least one point")
    if xs.shape != ys.shape:
        raise ValueError("xs and ys differ in length")
    w = np.ones_like(ys) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != ys.shape or np.any(w <= 0):
        raise ValueError("weights must be positive and match ys")
    if np.any(np.diff(xs) < 0):
        raise ValueError("xs must be sorted ascending")
    ux, first = np.unique(xs, return_index=True)
    wsum = np.add.reduceat(w, first)
    ymean = np.add.reduceat(w * ys, first) / wsum
    # (w * y) / w can be an ulp off y; singletons keep their value exactly
    single = np.diff(np.append(first, len(xs))) == 1
    ymean[single] = ys[first[single]]
    levels = _pool(ymean, wsum)
    # pooled means can come out a rounding step out of order; force the staircase
    levels = np.maximum.accumulate(levels)
    return StepFunction(ux, levels, wsum)


def pava_predict(f: StepFunction, x):
    """Level of the segment containing ``x``; clamped to the end levels outside."""
    x = np.asarray(x, dtype=float)
    k = np.searchsorted(f.breakpoints, x, side="right") - 1
    out = f.levels[np.clip(k, 0, len(f.levels) - 1)]
    return float(out) if out.ndim == 0 else out


@dataclass
class PlattParams:
    slope: float
    intercept: float

    def __post_init__(self):
        if not (np.isfinite(self.slope) and np.isfinite(self.intercept)):
            raise ValueError("Platt parameters must be finite")


def platt_fit(scores, labels, tol: float = 1e-10, max_iter: int = 100_000) -> PlattParams:
    """Fit ``sigmoid(A*s + B)`` by full-batch gradient descent.

    Targets use Platt's smoothing ``(n+ + 1)/(n+ + 2)`` and ``1/(n- + 2)``.
    Scores are standardised internally, so a fixed step ``1/L`` (``L`` the
    Lipschitz constant of the gradient) is a guaranteed descent step; the loop
    stops once the loss changes by less than ``tol``.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("Platt scaling needs both positive and negative labels")
    t = np.where(y == 1, (n_pos + 1) / (n_pos + 2), 1 / (n_neg + 2))

    mu = s.mean()
    sd = s.std() or 1.0
    u = (s - mu) / sd
    lip = 0.25 * max(1.0, float(np.mean(u * u)))
    lr = 1.0 / lip
    a, b = 0.0, 0.0
    prev = np.inf
    for _ in range(max_iter):
        z = a * u + b
        loss = float(np.mean(np.logaddexp(0.0, z) - t * z))
        if abs(prev - loss) < tol:
            break
        prev = loss
        r = expit(z) - t
        a -= lr * float(np.mean(r * u))
        b -= lr * float(np.mean(r))
    return PlattParams(a / sd, b - a * mu / sd)


def platt_predict(p: PlattParams, scores):
    return expit(p.slope * np.asarray(scores, dtype=float) + p.intercept)
