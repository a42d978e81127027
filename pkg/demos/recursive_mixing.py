"""Recursive estimate of a mixing density on a finite grid, against NPML and the DP posterior mean.

Run: python3 demos/recursive_mixing.py
"""

import numpy as np

from newtonsa.baselines import DPPrior, npb_sequential_imputation, npml_em
from newtonsa.mixture import (
    MixingDensity,
    NormalLocation,
    ThetaGrid,
    atoms_on_grid,
    binomial_on_grid,
    kl_marginal,
    quadrature_for,
    sample_mixture,
)
from newtonsa.newton import run_newton

grid = ThetaGrid.counting(np.arange(-4.0, 5.0))
kernel = NormalLocation(1.0)
quad = quadrature_for(kernel, grid)
truths = {
    "Bin(8, 0.6) shifted to -4..4": binomial_on_grid(grid, 8, 0.6),
    "atoms at -2 and 2": atoms_on_grid(grid, {-2.0: 0.5, 2.0: 0.5}),
}
rng = np.random.default_rng(2024)

for label, f in truths.items():
    print(f"\n== {label}")
    x = sample_mixture(f, kernel, rng, 10_000)[0][:, 0]
    run = run_newton(x, kernel, MixingDensity.uniform(grid), f_true=f, record=[10, 100, 1000, 10_000])
    print("K(f, f_n) along one pass:")
    for n, k in zip(run.steps, run.kl_theta):
        print(f"  n={int(n):>6}  {k:.4f}")

    x100 = x[:100]
    f0 = MixingDensity.uniform(grid)
    estimates = {
        "recursive": run_newton(x100, kernel, f0).final,
        "NPML": npml_em(x100, grid, kernel).estimate,
        "DP mean": npb_sequential_imputation(x100, DPPrior(1.0, f0), kernel, 1000, rng).estimate,
    }
    print("n=100, marginal divergence and masses:")
    print("  " + " " * 10 + "".join(f"{t:>7.0f}" for t in grid.points))
    print(f"  {'truth':<10}" + "".join(f"{m:7.3f}" for m in f.mass))
    for name, est in estimates.items():
        km = kl_marginal(f, est, kernel, quad)
        print(f"  {name:<10}" + "".join(f"{m:7.3f}" for m in est.mass) + f"   K={km:.4f}")
