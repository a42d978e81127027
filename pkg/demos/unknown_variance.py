"""Recursive mixing estimate when the sampling variance is unknown and estimated from replicates.

Run: python3 demos/unknown_variance.py
"""

import numpy as np

from newtonsa.mixture import MixingDensity, NormalUnknownVariance, ThetaGrid, binomial_on_grid, kl_marginal, quadrature_for, sample_mixture
from newtonsa.newton import run_newton
from newtonsa.npp import run_npp

grid = ThetaGrid.counting(np.arange(-4.0, 5.0))
f = binomial_on_grid(grid, 8, 0.5)
kernel = NormalUnknownVariance()
r, psi = 10, 1.5
rng = np.random.default_rng(7)

rows = sample_mixture(f, kernel, rng, 100, r=r, psi=psi)[0]
ube = run_npp(rows, grid)
bayes = run_npp(rows, grid, estimator="bayes")
known_k = kernel.mean_kernel(psi, r)
known = run_newton(rows.mean(axis=1), known_k, MixingDensity.uniform(grid))

print(f"true variance {psi}; running estimate every 20 rows:")
for n in range(0, 101, 20):
    print(f"  n={n:>3}  xi={ube.xis[n]:.4f}")
print(f"Bayes plug-in {bayes.xi:.4f} = unbiased {ube.xi:.4f} x 900/898")

quad = quadrature_for(known_k, grid)
print("\nmarginal divergence from the truth:")
print(f"  estimated variance  {kl_marginal(f, ube.final, known_k, quad, kernel_phi=kernel.mean_kernel(ube.xi, r)):.4f}")
print(f"  known variance      {kl_marginal(f, known.final, known_k, quad):.4f}")
print(f"projections: simplex {ube.proj_simplex[-1]}, variance box {ube.proj_box[-1]}")
