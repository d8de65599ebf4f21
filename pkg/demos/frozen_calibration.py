"""Recalibrate a frozen, miscalibrated upstream scorer per context.

Two traffic slices get opposite logit shifts (+1 and -1).  One layer per
slice is fitted on the frozen scores; the fallback slice that never appears
in the logs keeps the identity curve.

    python3 demos/frozen_calibration.py
"""

import numpy as np
from scipy.special import expit, logit

from isolayer import IsotonicConfig, TrainConfig, calibrate_frozen, forward


def main(n=100_000, seed=0):
    rng = np.random.default_rng(seed)
    cfg = IsotonicConfig(bucket_width=0.2)
    scores, labels, ctx = [], [], []
    for name, shift in (("desktop", 1.0), ("mobile", -1.0)):
        u = rng.normal(-1.0, 1.5, n)
        labels.append((rng.random(n) < expit(u)).astype(float))
        scores.append(expit(u + shift))
        ctx += [name] * n
    res = calibrate_frozen(np.concatenate(scores), np.concatenate(labels), ctx, cfg,
                           TrainConfig(epochs=60, batch_size=2048, lr=0.005),
                           expected_contexts=["desktop", "mobile", "tablet"])
    print(f"fallback contexts: {res.fallbacks}")
    print("context   rate    mean score   mean calibrated")
    for k, name in enumerate(("desktop", "mobile")):
        cal = forward(logit(scores[k]), res.params[name], cfg)
        print(f"{name:8s}  {labels[k].mean():.4f}  {scores[k].mean():.4f}       {cal.mean():.4f}")


if __name__ == "__main__":
    main()
