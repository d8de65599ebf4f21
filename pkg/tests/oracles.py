"""Independent brute-force references used by the tests.

Nothing here imports the code under test except for the types it needs to
draw random instances; every quantity is recomputed from its definition.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def brute_isotonic(y, w=None):
    """Monotone least squares by enumerating every contiguous partition.

    For each of the ``2**(n-1)`` ways to cut ``y`` into blocks, take block
    weighted means; among partitions whose means do not decrease, keep the
    one with the smallest weighted squared error.
    """
    y = [float(v) for v in y]
    w = [1.0] * len(y) if w is None else [float(v) for v in w]
    n = len(y)
    best, best_fit = math.inf, None
    for cuts in itertools.product((False, True), repeat=n - 1):
        bounds = [0] + [k + 1 for k, c in enumerate(cuts) if c] + [n]
        means = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            means.append(math.fsum(w[k] * y[k] for k in range(a, b)) / math.fsum(w[a:b]))
        if any(m2 < m1 for m1, m2 in zip(means, means[1:])):
            continue
        fit = []
        for (a, b), m in zip(zip(bounds[:-1], bounds[1:]), means):
            fit.extend([m] * (b - a))
        sse = math.fsum(w[k] * (fit[k] - y[k]) ** 2 for k in range(n))
        if sse < best - 1e-15:
            best, best_fit = sse, fit
    return np.array(best_fit)


def brute_auc(scores, labels) -> float:
    """Pair enumeration in exact rational arithmetic, rounded once."""
    pos = [s for s, t in zip(scores, labels) if t == 1]
    neg = [s for s, t in zip(scores, labels) if t == 0]
    halves = 0
    for p in pos:
        for q in neg:
            halves += 2 if p > q else 1 if p == q else 0
    return float(Fraction(halves, 2 * len(pos) * len(neg)))


def brute_soft_auc(scores, truth) -> float:
    num = den = 0.0
    n = len(scores)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            mass = truth[i] * (1 - truth[j])
            den += mass
            num += mass * (1.0 if scores[i] > scores[j] else 0.5 if scores[i] == scores[j] else 0.0)
    return num / den


def brute_ne(preds, labels) -> float:
    n = len(labels)
    ll = -math.fsum(math.log(p) if t == 1 else math.log(1 - p) for p, t in zip(preds, labels)) / n
    base = sum(labels) / n
    ref = -(base * math.log(base) + (1 - base) * math.log(1 - base))
    return ll / ref


def brute_ece(preds, labels, num_bins=10) -> float:
    n = len(preds)
    total = 0.0
    for b in range(num_bins):
        members = [k for k, p in enumerate(preds)
                   if min(int(p * num_bins), num_bins - 1) == b]
        if not members:
            continue
        mp = math.fsum(preds[k] for k in members) / len(members)
        ml = math.fsum(labels[k] for k in members) / len(members)
        total += len(members) / n * abs(mp - ml)
    return total


def random_pairs(rng, cfg, n):
    """Ordered input pairs ``x1 <= x2`` mixing wide draws, adjacent floats,
    pairs straddling bucket edges and exact ties."""
    lo, hi = cfg.lower_bound, cfg.upper_bound
    kind = rng.integers(0, 4, n)
    a = rng.uniform(lo - 5, hi + 5, n)
    b = rng.uniform(lo - 5, hi + 5, n)
    x1, x2 = np.minimum(a, b), np.maximum(a, b)
    adj = kind == 1
    x2[adj] = np.nextafter(x1[adj], np.inf)
    edge = kind == 2
    k = rng.integers(0, int(round((hi - lo) / cfg.bucket_width)) + 1, n)
    e = lo + k * cfg.bucket_width
    tiny = rng.uniform(0, 1e-12, n)
    x1[edge] = e[edge] - tiny[edge]
    x2[edge] = e[edge] + tiny[edge][::-1]
    same = kind == 3
    x2[same] = x1[same]
    return x1, x2


def random_weights(rng, shape):
    """Bucket weights with dead, tiny, ordinary and large entries."""
    scale = rng.choice([1e-6, 0.1, 1.0, 30.0], size=shape)
    w = rng.normal(0.0, 1.0, shape) * scale
    w[rng.random(shape) < 0.1] = 0.0
    return w
