"""Four small stochastic approximation drivers: a t quantile, an empirical Bayes prior mean,
adaptive Metropolis and SAEM.

Run: python3 demos/sa_gallery.py
"""

import numpy as np

from newtonsa.baselines import two_component_em
from newtonsa.core_sa import WeightSchedule
from newtonsa.gallery import (
    SAEMToyModel,
    eb_poisson_exp_sa,
    gaussian_log_target,
    run_am,
    run_saem,
    t_quantile_root,
    t_quantile_sa,
)

rng = np.random.default_rng(11)

root = t_quantile_root(0.75, 5)
print(f"0.75 quantile of t_5: {root:.6f}")
for x0 in (0.5, 0.75, 1.0):
    tr = t_quantile_sa(0.75, 5, x0, None, 10_000, rng)
    print(f"  start {x0:<4}  mean of last 100 iterates {tr.x[-100:, 0].mean():.4f}")

tr = eb_poisson_exp_sa(1.0, 1.5, None, 10_000, rng)
print(f"\nPoisson-exponential prior mean, truth 1.0: {tr.final[0]:.4f}")

am = run_am(gaussian_log_target([3.0], [[4.0]]), [0.0], 100_000, rng)
print(f"\nadaptive Metropolis on N(3, 4): mean {am.mu[0]:.3f}, variance {am.sigma[0, 0]:.3f}, acceptance {am.acceptance:.2f}")

model = SAEMToyModel()
x = model.sample(200, (-3.0, 3.0), rng)[0]
sa = run_saem(model, x, WeightSchedule("harmonic"), 2000, rng)
mus, lls = two_component_em(x, (-1.0, 1.0), model.lam, model.sigma)
print(f"\nSAEM means {np.round(sa.mu, 3)}, log-lik {sa.loglik[-1]:.3f}")
print(f"EM means   {np.round(mus[-1], 3)}, log-lik {lls[-1]:.3f}")
