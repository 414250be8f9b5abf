# %% [markdown]
# # Neal's funnel
#
# The first coordinate of the funnel is N(0, 1).  After training, extra
# MetFlow kernels with fresh noise pull the samples towards the narrow neck,
# which a KS test on z1 makes visible.

# %%
import argparse

import numpy as np
from scipy import stats

from metflow import build_model, marginal_ks, preset, sample, train

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

run = preset("funnel", seed=args.seed)
params, log = train(None, run)
model = build_model(run)
print(f"trained {log.n_iterations} iterations, smoothed ELBO {log.ema[-1]:.3f}")

# %%
for m in (1, 10, 100):
    s = sample(model, params, 1000, m, rng=np.random.default_rng([args.seed, 1]), u=log.noise)
    stat, p = marginal_ks(s, 0, stats.norm.cdf)
    z1 = s.points[:, 0]
    print(f"m={m:3d}: KS p={p:.3f}, z1 std {z1.std():.2f}, accept rate {s.meta['accept_rate']:.2f}")
