"""Stochastic approximation Monte Carlo for the 1-D Ising density of states.

The state space ``{-1, +1}^d`` is partitioned by energy level
``u_k = -(d - 1) + 2k``.  A random-walk Metropolis chain targets
``p(z) ∝ exp(-theta_{cell(z)})`` while the log cell weights are pushed
towards the desired visiting frequencies ``pi``:

    theta <- theta + w_n (zeta_n - pi).

In the limit ``theta_k = C + log Omega(u_k) - log pi_k``; the unknown ``C``
is fixed by ``sum_k Omega(u_k) = 2**d``.  The partition function at any
temperature then follows from ``Z(T) = sum_u Omega(u) exp(-u / T)``.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core_sa import WeightSchedule

MAX_D = 24
MAX_ENUM_D = 16


def default_schedule():
    """``w_n = min(0.1, 100 / n)``: a flat burn-in then harmonic decay."""
    return WeightSchedule("plateau", w0=0.1, n0=100.0)


@dataclass(frozen=True)
class IsingModel:
    """Open chain of ``d`` spins with nearest-neighbour coupling."""

    d: int

    def __post_init__(self):
        if not 2 <= self.d <= MAX_D:
            raise ValueError(f"d must be in [2, {MAX_D}], got {self.d}")

    @property
    def levels(self):
        return -(self.d - 1) + 2 * np.arange(self.d)

    @property
    def n_cells(self):
        return self.d

    def cell(self, energy):
        return (energy + self.d - 1) // 2


def ising_energy(config):
    """``E(x) = -sum_i x_i x_{i+1}``."""
    x = np.asarray(config)
    if x.ndim != 1 or x.size < 2 or not np.all((x == 1) | (x == -1)):
        raise ValueError("configuration must be a vector of +-1 spins")
    return int(-np.sum(x[:-1] * x[1:]))


def density_of_states_exact(d):
    """``Omega(u_k) = 2 C(d-1, k)`` as exact integers, with the energy levels."""
    if not 2 <= d <= MAX_D:
        raise ValueError(f"d must be in [2, {MAX_D}], got {d}")
    levels = -(d - 1) + 2 * np.arange(d)
    omega = np.array([2 * math.comb(d - 1, k) for k in range(d)], dtype=np.int64)
    return levels, omega


def density_of_states_enumerated(d):
    """Brute-force level counts over all ``2**d`` configurations."""
    if not 2 <= d <= MAX_ENUM_D:
        raise ValueError(f"enumeration needs 2 <= d <= {MAX_ENUM_D}")
    configs = np.array(list(itertools.product((-1, 1), repeat=d)), dtype=np.int8)
    energies = -np.sum(configs[:, :-1].astype(int) * configs[:, 1:], axis=1)
    levels = -(d - 1) + 2 * np.arange(d)
    omega = np.array([int(np.sum(energies == u)) for u in levels], dtype=np.int64)
    return levels, omega


def log_partition_exact(d, T):
    """``log Z(T) = d log 2 + (d - 1) log cosh(1 / T)``."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("temperature must be positive")
    b = 1.0 / T
    # log cosh without overflow
    logcosh = np.abs(b) + np.log1p(np.exp(-2 * np.abs(b))) - math.log(2)
    out = d * math.log(2) + (d - 1) * logcosh
    return float(out) if out.ndim == 0 else out


def partition_exact(d, T):
    """``Z(T) = 2**d cosh(1/T)**(d-1)``."""
    return np.exp(log_partition_exact(d, T))


def log_partition_from_dos(levels, omega, T):
    """``log sum_u Omega(u) exp(-u / T)`` (energy-temperature duality)."""
    T = np.atleast_1d(np.asarray(T, dtype=float))
    with np.errstate(divide="ignore"):
        lo = np.log(np.asarray(omega, dtype=float))
    out = logsumexp(lo[None, :] - np.asarray(levels, float)[None, :] / T[:, None], axis=1)
    return float(out[0]) if out.size == 1 else out


def partition_estimate(levels, omega_hat, T):
    """Plug-in ``Z_hat(T) = sum_u Omega_hat(u) exp(-u / T)``."""
    return np.exp(log_partition_from_dos(levels, omega_hat, T))


# ---------------------------------------------------------------------------
# the sampler
# ---------------------------------------------------------------------------


@dataclass
class SAMCState:
    theta: np.ndarray
    z: np.ndarray
    energy: int
    counts: np.ndarray

    @property
    def n(self):
        return int(self.counts.sum())


def samc_theta_update(theta, zeta, pi, w):
    """``theta + w (zeta - pi)``."""
    return np.asarray(theta, float) + w * (np.asarray(zeta, float) - np.asarray(pi, float))


def init_state(model: IsingModel, rng, theta0=None):
    z = rng.choice(np.array([-1, 1], dtype=np.int64), size=model.d)
    theta = np.zeros(model.n_cells) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    return SAMCState(theta, z, ising_energy(z), np.zeros(model.n_cells, dtype=np.int64))


def _flip_delta(z, j):
    d = z.size
    nb = 0
    if j > 0:
        nb += z[j - 1]
    if j < d - 1:
        nb += z[j + 1]
    return 2 * int(z[j]) * int(nb)


def samc_step(state: SAMCState, model: IsingModel, pi, w, rng) -> SAMCState:
    """Single-spin-flip Metropolis move under ``exp(-theta_cell)``, then the theta update."""
    j = int(rng.integers(model.d))
    e_new = state.energy + _flip_delta(state.z, j)
    c_old, c_new = model.cell(state.energy), model.cell(e_new)
    log_ratio = state.theta[c_old] - state.theta[c_new]
    z, energy = state.z, state.energy
    if log_ratio >= 0 or rng.random() < math.exp(log_ratio):
        z = z.copy()
        z[j] = -z[j]
        energy = e_new
    cell = model.cell(energy)
    zeta = np.zeros(model.n_cells)
    zeta[cell] = 1.0
    counts = state.counts.copy()
    counts[cell] += 1
    return SAMCState(samc_theta_update(state.theta, zeta, pi, w), z, energy, counts)


@dataclass
class SAMCResult:
    levels: np.ndarray
    theta: np.ndarray
    log_omega_hat: np.ndarray
    omega_hat: np.ndarray
    visits: np.ndarray
    n_iters: int
    flagged: bool
    meta: dict = field(default_factory=dict)

    @property
    def frequencies(self):
        return self.visits / self.visits.sum()

    def log_partition(self, T):
        return log_partition_from_dos(self.levels, self.omega_hat, T)


def normalise_dos(theta, pi, d):
    """Log and linear ``Omega_hat`` from ``theta`` with ``sum Omega_hat = 2**d``.

    Entries are rounded to multiples of ``ulp(2**d)``, so every partial sum
    is exactly representable, and the largest entry absorbs the rounding:
    the linear sum is exactly ``2**d`` in any summation order.
    """
    a = np.asarray(theta, float) + np.log(np.asarray(pi, float))
    log_omega = a - logsumexp(a) + d * math.log(2)
    q = math.ldexp(1.0, d - 52)
    omega = np.round(np.exp(log_omega) / q) * q
    k = int(np.argmax(omega))
    omega[k] = 0.0
    omega[k] = 2.0**d - math.fsum(omega)
    return log_omega, omega


def run_samc(model: IsingModel, n_iters, rng, pi=None, schedule=None, theta0=None) -> SAMCResult:
    """Estimate the density of states with ``n_iters`` SAMC iterations."""
    m = model.n_cells
    pi = np.full(m, 1.0 / m) if pi is None else np.asarray(pi, dtype=float)
    if pi.shape != (m,) or np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-12:
        raise ValueError("pi must be a positive probability vector over the cells")
    schedule = schedule if schedule is not None else default_schedule()
    state = init_state(model, rng, theta0)
    w = schedule.weights(n_iters).tolist()
    sites = rng.integers(model.d, size=n_iters).tolist()
    unif = rng.random(n_iters).tolist()
    # plain lists: this loop is the hot path
    z = state.z.tolist()
    d = model.d
    theta = state.theta.tolist()
    pil = pi.tolist()
    counts = [0] * m
    energy = state.energy
    off = d - 1
    for n in range(n_iters):
        j = sites[n]
        nb = (z[j - 1] if j > 0 else 0) + (z[j + 1] if j < d - 1 else 0)
        e_new = energy + 2 * z[j] * nb
        c_old = (energy + off) >> 1
        c_new = (e_new + off) >> 1
        lr = theta[c_old] - theta[c_new]
        if lr >= 0 or unif[n] < math.exp(lr):
            z[j] = -z[j]
            energy = e_new
            c_old = c_new
        wn = w[n]
        for k in range(m):
            theta[k] -= wn * pil[k]
        theta[c_old] += wn
        counts[c_old] += 1
    theta = np.array(theta)
    visits = np.array(counts, dtype=np.int64)
    flagged = bool(np.any(visits == 0))
    if flagged:
        warnings.warn(f"SAMC: {int(np.sum(visits == 0))} energy level(s) never visited; estimate flagged")
    log_omega, omega = normalise_dos(theta, pi, d)
    return SAMCResult(
        levels=model.levels,
        theta=theta,
        log_omega_hat=log_omega,
        omega_hat=omega,
        visits=visits,
        n_iters=n_iters,
        flagged=flagged,
        meta={"schedule": schedule.to_dict(), "proposal": "single-spin-flip", "pi": pi.tolist()},
    )


def write_dos_csv(path, result: SAMCResult):
    _, exact = density_of_states_exact(len(result.levels))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["u", "omega_exact", "omega_hat"])
        for u, oe, oh in zip(result.levels, exact, result.omega_hat):
            wr.writerow([int(u), int(oe), repr(float(oh))])


def write_partition_csv(path, result: SAMCResult, temps):
    d = len(result.levels)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["T", "logZ_exact", "logZ_hat"])
        for T in temps:
            wr.writerow([repr(float(T)), repr(log_partition_exact(d, T)), repr(float(result.log_partition(T)))])
