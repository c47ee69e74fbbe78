"""
Diffusion algebra in a few lines
================================

Noise a field, undo it with the exact noise, then run the 15-step
deterministic sampler with a denoiser that knows the answer. Every number
printed here should be at round-off level.
"""

import numpy as np

from ged.ensemble import EnsembleConfig, OracleDenoiser, sample_one
from ged.schedule import NoiseSchedule, estimate_x0, forward_diffuse, sampling_times

schedule = NoiseSchedule()  # cosine in angle, signal rate 0.95 -> 0.02

# the schedule on the sampling grid
for t in sampling_times(15)[::3]:
    s, n = schedule.rates(t)
    print(f"t={t:.3f}  signal={s:.4f}  noise={n:.4f}  s^2+n^2-1={s * s + n * n - 1:+.1e}")

# forward noising and its inverse
rng = np.random.default_rng(0)
x0 = rng.uniform(0, 1, (96, 96, 3))
eps = rng.standard_normal(x0.shape)
x_t = forward_diffuse(x0, eps, 0.7, schedule)
print("round trip error", np.abs(estimate_x0(x_t, eps, 0.7, schedule) - x0).max())

# the sampler with a perfect noise predictor lands back on x0
out = sample_one(OracleDenoiser(x0), None, EnsembleConfig(), seed=1, field_shape=x0.shape)
print("oracle sampling error", np.abs(out - x0).max())
