"""Density of states of a 10-spin Ising chain by stochastic approximation Monte Carlo.

Run: python3 demos/ising_density_of_states.py
"""

import numpy as np

from newtonsa.samc import IsingModel, density_of_states_exact, log_partition_exact, run_samc

d = 10
res = run_samc(IsingModel(d), 100_000, np.random.default_rng(3))
levels, omega = density_of_states_exact(d)

print(f"{'energy':>7} {'exact':>8} {'estimate':>10} {'visits':>7}")
for u, w, w_hat, v in zip(levels, omega, res.omega_hat, res.visits):
    print(f"{int(u):>7} {int(w):>8} {w_hat:>10.1f} {int(v):>7}")
print(f"sum of estimates: {float(np.sum(res.omega_hat))!r} (2**{d} = {2**d})")

print(f"\n{'T':>4} {'log Z exact':>12} {'log Z est':>10}")
for T in np.arange(1.0, 4.01, 0.5):
    print(f"{T:>4.1f} {log_partition_exact(d, T):>12.4f} {float(res.log_partition(T)):>10.4f}")
