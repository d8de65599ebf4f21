"""Seeded synthetic datasets.

* ``gen_quadratic`` / ``gen_piecewise``: scalar calibration tasks where the
  input is ``logit(x)`` for ``x ~ U(0, 1)`` and the label is drawn from a
  known target curve.
* ``gen_position_logs``: ranked impression logs with a position-dependent
  examination probability and a hidden relevance that is a fixed function of
  the logged features.

All generators are pure functions of their arguments and seed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit

__all__ = [
    "LabeledDataset",
    "PositionBiasScenario",
    "default_propensity",
    "gen_piecewise",
    "gen_position_logs",
    "gen_quadratic",
    "piecewise_target",
    "quadratic_target",
]


@dataclass
class LabeledDataset:
    """Column-oriented labeled rows.

    Absent optional values are ``NaN`` (floats) or ``""`` (ids).  ``features``
    has shape ``(n, d)``; ``d`` may be 0.
    """

    input: np.ndarray
    label: np.ndarray
    features: np.ndarray | None = None
    context_id: np.ndarray | None = None
    task_id: np.ndarray | None = None
    latent_truth: np.ndarray | None = None

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=float)
        n = len(self.input)
        self.label = np.asarray(self.label, dtype=float)
        if self.features is None:
            self.features = np.zeros((n, 0))
        self.features = np.asarray(self.features, dtype=float).reshape(n, -1)
        for name in ("context_id", "task_id"):
            col = getattr(self, name)
            col = np.full(n, "", dtype=object) if col is None else np.asarray(col).astype(str).astype(object)
            setattr(self, name, col)
        if self.latent_truth is None:
            self.latent_truth = np.full(n, np.nan)
        self.latent_truth = np.asarray(self.latent_truth, dtype=float)
        for name in ("label", "context_id", "task_id", "latent_truth"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name!r} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.input)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "LabeledDataset":
        return LabeledDataset(self.input[rows], self.label[rows], self.features[rows],
                              self.context_id[rows], self.task_id[rows], self.latent_truth[rows])

    def tasks(self) -> list:
        return sorted(set(self.task_id.tolist()))


def quadratic_target(x):
    return np.asarray(x, dtype=float) ** 2


def piecewise_target(x):
    """``x**2`` up to 0.95, then the mirrored ``(1.9 - x)**2``; continuous at 0.95."""
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0.95, x ** 2, (1.9 - x) ** 2)


def _gen_scalar(n, seed, target):
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    # open interval: logit(0) would be -inf
    x = rng.uniform(np.nextafter(0.0, 1.0), 1.0, n)
    truth = target(x)
    labels = (rng.random(n) < truth).astype(float)
    return LabeledDataset(logit(x), labels, latent_truth=truth)


def gen_quadratic(n: int, seed: int = 0) -> LabeledDataset:
    """Labels ~ Bernoulli(x**2), input = logit(x), x ~ U(0, 1)."""
    return _gen_scalar(n, seed, quadratic_target)


def gen_piecewise(n: int, seed: int = 0) -> LabeledDataset:
    """Like :func:`gen_quadratic` with a target that bends down above 0.95."""
    return _gen_scalar(n, seed, piecewise_target)


def default_propensity(k: int) -> np.ndarray:
    """Examination probability ``1 / log2(p + 1)`` for positions ``1..k``."""
    p = np.arange(1, k + 1)
    return 1.0 / np.log2(p + 1.0)


@dataclass(frozen=True)
class PositionBiasScenario:
    """Parameters of the position-biased impression log simulator.

    Relevance is ``sigmoid(relevance_weights . phi + relevance_bias)`` with
    ``phi ~ N(0, I)``.  The last feature is a logged ranker signal with zero
    relevance weight: under ``oracle-sorted`` exposure each session of
    ``position_count`` items is ordered by ``logit(r) + ranker_noise * phi[-1]``,
    so that feature predicts position without predicting relevance.
    ``uniform`` exposure assigns positions by a random permutation.

    ``tasks`` name the emitted labels; task ``k`` has relevance
    ``r ** relevance_power[k]`` and examination ``propensity ** propensity_power[k]``.
    """

    position_count: int = 5
    propensity_curve: tuple | None = None
    relevance_weights: tuple = (1.5, -1.0, 0.75, 0.0)
    relevance_bias: float = -1.0
    exposure_policy: str = "oracle-sorted"
    ranker_noise: float = 1.0
    label_model: str = "multiplicative"
    tasks: tuple = ("click", "long_dwell")
    relevance_power: tuple = (1.0, 2.0)
    propensity_power: tuple = (1.0, 0.5)
    sample_count: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.position_count < 1:
            raise ValueError("position_count must be >= 1")
        prop = self.propensities()
        if len(prop) != self.position_count:
            raise ValueError("propensity_curve length must equal position_count")
        if np.any(prop <= 0) or np.any(prop > 1) or np.any(np.diff(prop) > 0):
            raise ValueError("propensities must lie in (0, 1] and be non-increasing")
        if self.exposure_policy not in ("uniform", "oracle-sorted"):
            raise ValueError(f"unknown exposure policy {self.exposure_policy!r}")
        if self.label_model not in ("multiplicative", "logit-shift"):
            raise ValueError(f"unknown label model {self.label_model!r}")
        if not len(self.tasks) == len(self.relevance_power) == len(self.propensity_power):
            raise ValueError("tasks, relevance_power and propensity_power must align")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if len(self.relevance_weights) < 1:
            raise ValueError("need at least one feature")

    def propensities(self) -> np.ndarray:
        if self.propensity_curve is None:
            return default_propensity(self.position_count)
        return np.asarray(self.propensity_curve, dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PositionBiasScenario":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def gen_position_logs(scenario: PositionBiasScenario) -> LabeledDataset:
    """Simulate ranked impressions and their per-task labels.

    Rows are impression-major: one row per (impression, task).  ``context_id``
    is the 1-based display position, ``input`` the logging ranker's score and
    ``latent_truth`` the task relevance.
    """
    sc = scenario
    rng = np.random.default_rng(sc.seed)
    k = sc.position_count
    n = sc.sample_count
    sessions = -(-n // k)
    theta = np.asarray(sc.relevance_weights, dtype=float)
    phi = rng.standard_normal((sessions * k, len(theta)))
    rel_logit = phi @ theta + sc.relevance_bias
    rel = expit(rel_logit)
    score = rel_logit + sc.ranker_noise * phi[:, -1]

    if sc.exposure_policy == "uniform":
        ranks = rng.permuted(np.tile(np.arange(k), (sessions, 1)), axis=1)
    else:
        by_session = score.reshape(sessions, k)
        order = np.argsort(-by_session, axis=1, kind="stable")
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, np.arange(k)[None, :], axis=1)
    position = ranks.reshape(-1)[:n] + 1
    phi, rel, score = phi[:n], rel[:n], score[:n]

    prop = sc.propensities()[position - 1]
    n_tasks = len(sc.tasks)
    truth = np.empty((n, n_tasks))
    labels = np.empty((n, n_tasks))
    for j in range(n_tasks):
        task_rel = rel ** sc.relevance_power[j]
        examine = prop ** sc.propensity_power[j]
        if sc.label_model == "multiplicative":
            p_click = task_rel * examine
        else:
            p_click = expit(logit(task_rel) + np.log(examine))
        truth[:, j] = task_rel
        labels[:, j] = rng.random(n) < p_click

    rep = np.repeat
    return LabeledDataset(
        input=rep(score, n_tasks),
        label=labels.reshape(-1),
        features=rep(phi, n_tasks, axis=0),
        context_id=rep(position.astype(str), n_tasks),
        task_id=np.tile(np.asarray(sc.tasks, dtype=object), n),
        latent_truth=truth.reshape(-1),
    )
