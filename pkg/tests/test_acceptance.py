"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N ...: PASS|FAIL`` line (see ``conftest.py``)
before asserting, so a full run ends with a per-criterion summary.
"""

import time

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit, logit

from isolayer.baselines import pava_fit, pava_predict
from isolayer.bias_sim import (LabeledDataset, PositionBiasScenario, gen_piecewise,
                               gen_position_logs, gen_quadratic, piecewise_target)
from isolayer.cli import main
from isolayer.context import EmbeddingTable, conditioned_forward
from isolayer.core import IsotonicConfig, IsotonicParams, clip_input, forward, preactivation
from isolayer.dual_tower import (DualTowerModel, DualTrainConfig, inference_head,
                                 isotonic_head, joint_gradients, joint_loss, neutralized_head,
                                 train_dual_tower)
from isolayer.metrics import auc, ece, normalized_entropy, oe_ratio, soft_auc
from isolayer.training import TrainConfig, calibrate_frozen, finite_difference_check, fit
from oracles import (brute_auc, brute_ece, brute_isotonic, brute_ne, random_pairs,
                     random_weights)

APPENDIX = IsotonicConfig(-17.0, 8.0, 0.2, 12)
MAIN = IsotonicConfig()
# large batches and a small rate keep the final Adam iterate near the optimum
LAYER_HP = TrainConfig(epochs=60, batch_size=2048, lr=0.005)


# ---------------------------------------------------------------------------
# 1. monotonicity

def _fuzz(cfg, draws, seed, block=1000):
    """Violations of ``y(x1) <= y(x2)`` over independent (params, embedding, pair) draws.

    Every draw gets its own weights, embedding row and biases; they enter as
    per-row offsets on a zero base so one vectorised call covers a block.
    """
    rng = np.random.default_rng(seed)
    zero = IsotonicParams(np.zeros((cfg.units, cfg.num_buckets)), np.zeros(cfg.units))
    bad = 0
    for start in range(0, draws, block):
        b = min(block, draws - start)
        x1, x2 = random_pairs(rng, cfg, b)
        w = random_weights(rng, (b, cfg.units, cfg.num_buckets))
        emb = random_weights(rng, (b, cfg.num_buckets))
        bias = rng.normal(0, 3, (b, cfg.units)) + rng.normal(0, 1, (b, 1))
        x = np.concatenate([x1, x2])
        for u in range(cfg.units):
            off = w[:, u] + emb
            y = forward(x, zero, cfg, u, offset=np.concatenate([off, off]),
                        bias_offset=np.concatenate([bias[:, u], bias[:, u]]))
            bad += int(np.sum(y[:b] > y[b:]))
    return bad


def _fuzz_table(cfg, draws, seed):
    """Same property through a context table, with shared base params."""
    rng = np.random.default_rng(seed)
    params = IsotonicParams(random_weights(rng, (1, cfg.num_buckets)), rng.normal(size=1))
    ctx = [str(k) for k in range(20)]
    table = EmbeddingTable.zeros(ctx, cfg, context_bias=True)
    table.rows[1:] = random_weights(rng, table.rows[1:].shape)
    table.context_bias[1:] = rng.normal(0, 2, len(ctx))
    x1, x2 = random_pairs(rng, cfg, draws)
    c = rng.choice(ctx + ["unseen"], draws)
    return int(np.sum(conditioned_forward(x1, params, cfg, c, table)
                      > conditioned_forward(x2, params, cfg, c, table)))


def test_c01_monotonicity(record):
    t0 = time.perf_counter()
    counts = {"appendix": _fuzz(APPENDIX, 10_000, 1), "main": _fuzz(MAIN, 10_000, 2),
              "table": _fuzz_table(MAIN, 10_000, 3)}
    elapsed = time.perf_counter() - t0
    ok = not any(counts.values()) and elapsed < 10
    record(1, "monotonicity", ok, f"violations={counts} time={elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. identity

def test_c02_identity(record):
    worst = 0.0
    for cfg in (APPENDIX, MAIN):
        grid = np.linspace(cfg.lower_bound + cfg.clip_epsilon,
                           cfg.upper_bound - cfg.clip_epsilon, 10_000)
        ident = IsotonicParams.identity(cfg)
        for u in range(cfg.units):
            z = preactivation(grid, ident, cfg, u)
            worst = max(worst, float(np.max(np.abs(z - clip_input(grid, cfg)))))
    ok = worst <= 1e-9
    record(2, "identity", ok, f"max|z-x|={worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. gradients

def _dual_fd(model, batch, rng, coords=120, h=1e-6):
    _, grads = joint_gradients(batch, model)
    params = model.get_params()
    keys = sorted(params)
    worst, used = 0.0, 0
    while used < coords:
        key = keys[rng.integers(len(keys))]
        flat, g = params[key].reshape(-1), grads[key].reshape(-1)
        j = int(rng.integers(flat.size))
        keep = flat[j]
        flat[j] = keep + h
        up = joint_loss(batch, model)
        flat[j] = keep - h
        down = joint_loss(batch, model)
        flat[j] = keep
        num = (up - down) / (2 * h)
        worst = max(worst, abs(g[j] - num) / max(abs(num), 1e-5))
        used += 1
    return worst


def test_c03_gradients(record):
    rng = np.random.default_rng(0)
    layer = 0.0
    for cfg, seed in ((MAIN, 0), (APPENDIX, 1)):
        params = IsotonicParams(rng.normal(0.3, 1, (cfg.units, cfg.num_buckets)),
                                rng.normal(size=cfg.units))
        offset = rng.normal(0, 0.5, cfg.num_buckets)
        layer = max(layer, finite_difference_check(params, cfg, 150, seed),
                    finite_difference_check(params, cfg, 150, seed, offset=offset,
                                            unit=cfg.units - 1))
    ds = gen_position_logs(PositionBiasScenario(sample_count=30, seed=4))
    model = DualTowerModel.create(ds.feature_dim, ["click", "long_dwell"],
                                  [str(p) for p in range(1, 6)], IsotonicConfig(bucket_width=0.2),
                                  seed=4, context_bias=True, inference_affine=True)
    for head in model.heads.values():
        # effective weights kept away from the relu kink
        head.params.weights[:] = rng.uniform(0.2, 1.5, head.params.weights.shape)
        head.table.rows[1:] = rng.uniform(-0.15, 0.15, head.table.rows[1:].shape)
        head.table.context_bias[1:] = rng.normal(size=5)
    dual = _dual_fd(model, ds, rng)
    ok = layer < 1e-5 and dual < 1e-4
    record(3, "gradients", ok, f"layer={layer:.2e} dual={dual:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. quadratic target

def test_c04_quadratic(record):
    t0 = time.perf_counter()
    ds = gen_quadratic(100_000, 0)
    params, _ = fit(ds, MAIN, LAYER_HP)
    # interior grid: the end points 0 and 1 have infinite logits
    grid = np.linspace(0.0025, 0.9975, 200)
    dev = float(np.max(np.abs(forward(logit(grid), params, MAIN) - grid ** 2)))
    elapsed = time.perf_counter() - t0
    ok = dev < 0.02 and elapsed < 120
    record(4, "quadratic fit", ok, f"max_dev={dev:.4f} time={elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. piecewise target with a local inversion

def test_c05_piecewise(record):
    ds = gen_piecewise(100_000, 0)
    params, _ = fit(ds, MAIN, LAYER_HP)
    x1, x2 = random_pairs(np.random.default_rng(5), MAIN, 100_000)
    grid = np.linspace(-25, 15, 20_001)
    y = forward(grid, params, MAIN)
    monotone = (np.all(np.diff(y) >= 0)
                and np.all(forward(x1, params, MAIN) <= forward(x2, params, MAIN)))
    tail = np.linspace(0.95, 1.0, 1001)[1:]
    y_tail = forward(logit(np.minimum(tail, 1 - 1e-12)), params, MAIN)
    no_drop = bool(np.all(np.diff(y_tail) >= 0))
    target_drops = bool(piecewise_target(1.0) < piecewise_target(0.95))
    p = expit(ds.input)
    order = np.argsort(p, kind="stable")
    proj = pava_fit(p[order], ds.label[order])
    sel = p > 0.95
    mad = float(np.mean(np.abs(forward(ds.input[sel], params, MAIN) - pava_predict(proj, p[sel]))))
    ok = monotone and no_drop and target_drops and mad < 0.05
    record(5, "piecewise fit", ok,
           f"monotone={monotone} tail_nondecreasing={no_drop} tail_mad={mad:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 6. PAVA oracle

def test_c06_pava_oracle(record):
    rng = np.random.default_rng(6)
    worst, idem = 0.0, True
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        y = rng.choice([rng.normal(size=n), rng.integers(0, 3, n).astype(float)])
        w = rng.uniform(0.1, 3, n) if rng.random() < 0.5 else np.ones(n)
        xs = np.arange(n, dtype=float)
        f = pava_fit(xs, y, w)
        worst = max(worst, float(np.max(np.abs(f.levels - brute_isotonic(y, w)))))
        idem &= bool(np.array_equal(pava_fit(xs, f.levels, w).levels, f.levels))
    ok = worst <= 1e-10 and idem
    record(6, "pava oracle", ok, f"max_err={worst:.1e} idempotent={idem}")
    assert ok


# ---------------------------------------------------------------------------
# 7 and 8. position-bias recovery

SEEDS = range(5)


@pytest.fixture(scope="module")
def bias_runs():
    """Train the dual model and the position-blind baseline for each seed."""
    t0 = time.perf_counter()
    ctx = [str(p) for p in range(1, 6)]
    runs = []
    for seed in SEEDS:
        sc = PositionBiasScenario(position_count=5, sample_count=100_000, seed=seed)
        train = gen_position_logs(sc)
        test = gen_position_logs(PositionBiasScenario(sample_count=100_000, seed=seed + 1000))
        hp = DualTrainConfig(seed=seed)
        dual, _ = train_dual_tower(train, DualTowerModel.create(
            train.feature_dim, sc.tasks, ctx, seed=seed), hp)
        blind, _ = train_dual_tower(train, DualTowerModel.create(
            train.feature_dim, sc.tasks, ctx, seed=seed, beta=0.0), hp)
        runs.append({"seed": seed, "train": train, "test": test, "dual": dual, "blind": blind})
    return runs, time.perf_counter() - t0


def _clicks(ds):
    return ds.subset(ds.task_id == "click")


def test_c07_bias_recovery(record, bias_runs):
    runs, elapsed = bias_runs
    dual_auc, blind_auc, invariant = [], [], True
    for run in runs:
        sub = _clicks(run["test"])
        a_dual = soft_auc(inference_head(sub.features, run["dual"], "click"), sub.latent_truth)
        a_blind = soft_auc(inference_head(sub.features, run["blind"], "click"), sub.latent_truth)
        dual_auc.append(a_dual)
        blind_auc.append(a_blind)
        perm = np.random.default_rng(run["seed"]).permutation(len(sub))
        moved = LabeledDataset(sub.input, sub.label, sub.features, sub.context_id[perm],
                               sub.task_id)
        for fn in (neutralized_head, inference_head):
            invariant &= bool(np.array_equal(fn(sub.features, run["dual"], "click"),
                                             fn(moved.features, run["dual"], "click")))
        invariant &= bool(np.array_equal(
            np.argsort(-neutralized_head(sub.features, run["dual"], "click"), kind="stable"),
            np.argsort(-neutralized_head(moved.features, run["dual"], "click"), kind="stable")))
    diffs = np.array(dual_auc) - np.array(blind_auc)
    p = float(stats.ttest_rel(dual_auc, blind_auc, alternative="greater").pvalue)
    ok = bool(np.all(diffs > 0)) and diffs.mean() > 0 and p < 0.01 and invariant and elapsed < 600
    record(7, "bias recovery", ok,
           f"auc_gain={np.round(diffs, 4).tolist()} p={p:.1e} invariant={invariant} "
           f"time={elapsed:.0f}s")
    assert ok


def test_c08_oe_pattern(record, bias_runs):
    runs, _ = bias_runs
    # the criterion is judged on the first seed's held-out logs; other seeds are diagnostics
    detail, ok = [], True
    for k, run in enumerate(runs):
        sub = _clicks(run["test"])
        blind = oe_ratio(inference_head(sub.features, run["blind"], "click"), sub.label,
                         sub.context_id)
        iso = oe_ratio(isotonic_head(sub.features, sub.context_id, run["dual"], "click"),
                       sub.label, sub.context_id)
        tr = _clicks(run["train"])
        iso_in = oe_ratio(isotonic_head(tr.features, tr.context_id, run["dual"], "click"),
                          tr.label, tr.context_id)
        if k == 0:
            ok = blind["1"] > 1 and blind["5"] < 1 and all(0.9 <= v <= 1.1 for v in iso.values())
            detail.append(f"baseline={_fmt(blind)} iso={_fmt(iso)}")
        print(f"  seed {run['seed']}: baseline {_fmt(blind)} iso held-out {_fmt(iso)} "
              f"iso in-sample {_fmt(iso_in)}")
    record(8, "o/e pattern", ok, " ".join(detail))
    assert ok


def _fmt(oe):
    return "[" + ", ".join(f"{v:.3f}" for v in oe.values()) + "]"


# ---------------------------------------------------------------------------
# 9. frozen-score calibration

def test_c09_calibration(record):
    rng = np.random.default_rng(9)
    n = 100_000
    cfg = IsotonicConfig(bucket_width=0.2)
    scores, labels, ctx = [], [], []
    for name, shift in (("up", 1.0), ("down", -1.0)):
        u = rng.normal(-1.0, 1.5, n)
        labels.append((rng.random(n) < expit(u)).astype(float))
        scores.append(expit(u + shift))
        ctx += [name] * n
    before, after = {}, {}
    res = calibrate_frozen(np.concatenate(scores), np.concatenate(labels), ctx, cfg, LAYER_HP)
    for k, name in enumerate(("up", "down")):
        rate = labels[k].mean()
        before[name] = float(scores[k].mean() / rate - 1)
        after[name] = float(forward(logit(scores[k]), res.params[name], cfg).mean() / rate - 1)
    ok = all(abs(v) < 0.01 for v in after.values())
    record(9, "calibration", ok,
           "rel_err_before=" + str({k: round(v, 3) for k, v in before.items()})
           + " after=" + str({k: round(v, 4) for k, v in after.items()}))
    assert ok


# ---------------------------------------------------------------------------
# 10. metric oracles

def test_c10_metric_oracles(record):
    rng = np.random.default_rng(10)
    worst = {"auc": 0.0, "ne": 0.0, "ece": 0.0}
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        y = rng.integers(0, 2, n).astype(float)
        y[:2] = [0, 1]
        rng.shuffle(y)
        p = rng.integers(1, 20, n) / 20.0 if rng.random() < 0.5 else rng.uniform(0.01, 0.99, n)
        worst["auc"] = max(worst["auc"], abs(auc(p, y) - float(brute_auc(p, y))))
        worst["ne"] = max(worst["ne"], abs(normalized_entropy(p, y) - brute_ne(p, y)))
        worst["ece"] = max(worst["ece"], abs(ece(p, y) - brute_ece(p, y)))
    # AUC is exact; NE and ECE are compared up to a few ulps of summation order
    ok = worst["auc"] == 0 and worst["ne"] < 1e-12 and worst["ece"] < 1e-12
    record(10, "metric oracles", ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------------------
# 11. CLI reproducibility

def _pipeline(d):
    d.mkdir()
    s = str(d)
    coarse = ["--bucket-width", "0.2"]
    steps = [
        ["gen", "quadratic", "--n", "3000", "--seed", "3", "--out", f"{s}/q.csv",
         "--report", f"{s}/gen_q.json"],
        ["gen", "position", "--n", "600", "--seed", "4", "--out", f"{s}/p.csv",
         "--report", f"{s}/gen_p.json"],
        ["fit", "--data", f"{s}/q.csv", *coarse, "--epochs", "3", "--out", f"{s}/iso.json",
         "--report", f"{s}/fit.json"],
        ["fit", "--data", f"{s}/q.csv", "--kind", "pava", "--out", f"{s}/pava.json",
         "--report", f"{s}/fit_pava.json"],
        ["fit", "--data", f"{s}/q.csv", "--kind", "platt", "--out", f"{s}/platt.json",
         "--report", f"{s}/fit_platt.json"],
        ["fit", "--data", f"{s}/p.csv", *coarse, "--context", "--epochs", "2",
         "--out", f"{s}/ctx.json", "--report", f"{s}/fit_ctx.json"],
        ["train-dual", "--data", f"{s}/p.csv", *coarse, "--epochs", "2", "--seed", "5",
         "--out", f"{s}/dual.json", "--report", f"{s}/dual_report.json"],
        ["score", "--model", f"{s}/dual.json", "--data", f"{s}/p.csv", "--out", f"{s}/scores.csv"],
        ["calibrate", "--scores", f"{s}/scores.csv", *coarse, "--epochs", "2",
         "--out", f"{s}/cal.json", "--report", f"{s}/cal_report.json"],
        ["eval", "--model", f"{s}/dual.json", "--data", f"{s}/p.csv", "--out", f"{s}/eval.json"],
        ["eval", "--model", f"{s}/iso.json", "--data", f"{s}/q.csv", "--out", f"{s}/eval_q.json"],
        ["export-curve", "--model", f"{s}/ctx.json", "--context", "1", "--context", "5",
         "--out", f"{s}/curve.csv"],
    ]
    codes = [main(argv) for argv in steps]
    return codes, {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_c11_reproducibility(record, tmp_path):
    codes_a, files_a = _pipeline(tmp_path / "a")
    codes_b, files_b = _pipeline(tmp_path / "b")
    same = sorted(k for k in files_a if files_a[k] == files_b.get(k))
    ok = (not any(codes_a) and not any(codes_b) and set(files_a) == set(files_b)
          and len(same) == len(files_a))
    record(11, "reproducibility", ok, f"identical_files={len(same)}/{len(files_a)} "
                                       f"exit_codes={sorted(set(codes_a + codes_b))}")
    assert ok
