"""Show how the layer handles a target with a local inversion near x = 1.

The target rises as x**2 up to x = 0.95 and then falls as (1.9 - x)**2.  A
monotone model cannot follow the dip; the best it can do is flatten out,
which is what the pool-adjacent-violators projection of the noisy labels does.

    python3 demos/piecewise_inversion.py
"""

import numpy as np
from scipy.special import expit, logit

from isolayer import (IsotonicConfig, TrainConfig, fit, forward, gen_piecewise, pava_fit,
                      pava_predict, piecewise_target)


def main(n=100_000, seed=0):
    cfg = IsotonicConfig()
    ds = gen_piecewise(n, seed)
    params, _ = fit(ds, cfg, TrainConfig(epochs=60, batch_size=2048, lr=0.005, seed=seed))

    p = expit(ds.input)
    order = np.argsort(p, kind="stable")
    proj = pava_fit(p[order], ds.label[order])

    print("   x    target    layer     PAVA")
    for x in (0.5, 0.8, 0.9, 0.93, 0.95, 0.96, 0.97, 0.98, 0.99, 0.999):
        print(f"{x:5.3f}  {piecewise_target(x):.4f}   {forward(logit(x), params, cfg):.4f}"
              f"   {pava_predict(proj, x):.4f}")

    tail = p > 0.95
    mad = np.mean(np.abs(forward(ds.input[tail], params, cfg) - pava_predict(proj, p[tail])))
    print(f"\nmean |layer - PAVA| on (0.95, 1]: {mad:.4f} over {tail.sum()} rows")


if __name__ == "__main__":
    main()
