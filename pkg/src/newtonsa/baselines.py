"""Comparators for the recursive estimator.

Nonparametric maximum likelihood on a fixed grid (EM), the Dirichlet-process
posterior mean via sequential imputation, and exact small-``n`` oracles for
both.  A plain two-component EM doubles as the reference for SAEM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .mixture import Kernel, MixingDensity, ThetaGrid, ZeroMarginalError

EM_TOL = 1e-8
EM_MAX_ITERS = 10_000
ENUM_MAX_N = 8


# ---------------------------------------------------------------------------
# NPML via EM
# ---------------------------------------------------------------------------


@dataclass
class EMResult:
    estimate: MixingDensity
    loglik: np.ndarray
    n_iters: int
    converged: bool

    @property
    def increments(self):
        return np.diff(self.loglik)


def npml_em(data, grid: ThetaGrid, kernel: Kernel, max_iters=EM_MAX_ITERS, tol=EM_TOL, f0=None) -> EMResult:
    """Grid NPML by the EM fixed point ``m_k <- m_k n^-1 sum_i p(x_i|theta_k) / Pi(x_i)``.

    Iteration stops once the log-likelihood gain falls below ``tol``.
    ``loglik[j]`` is the log-likelihood after ``j`` updates.
    """
    x = np.asarray(data, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("data must be nonempty")
    lp = kernel.logpdf(x, grid.points)
    shift = lp.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(shift)):
        raise ZeroMarginalError(x[np.flatnonzero(~np.isfinite(shift[:, 0]))[0]])
    P = np.exp(lp - shift)
    const = float(shift.sum())
    mass = MixingDensity.uniform(grid).mass if f0 is None else f0.mass.copy()
    if grid.d == 1:
        return EMResult(MixingDensity.from_mass(grid, np.ones(1)), np.array([const + float(np.log(P).sum())]), 0, True)

    def ll(m):
        return const + float(np.log(P @ m).sum())

    hist = [ll(mass)]
    converged = False
    k = 0
    for k in range(1, max_iters + 1):
        marg = P @ mass
        mass = mass * (P / marg[:, None]).mean(axis=0)
        mass /= mass.sum()
        hist.append(ll(mass))
        if hist[-1] - hist[-2] < tol:
            converged = True
            break
    return EMResult(MixingDensity.from_mass(grid, mass), np.array(hist), k, converged)


# ---------------------------------------------------------------------------
# Dirichlet-process posterior means
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DPPrior:
    """``f ~ D(alpha, f0)``."""

    alpha: float
    f0: MixingDensity

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def base_mass(self):
        return self.f0.mass


def dpp_one_step_posterior_mean(x, prior: DPPrior, kernel: Kernel) -> MixingDensity:
    """``E(f | x)`` for one observation.

    Given ``theta_1`` the posterior is ``D(alpha + 1, (alpha f0 + delta) / (alpha + 1))``
    and averaging over ``theta_1 | x`` gives ``(alpha f0 + post) / (alpha + 1)``.
    """
    grid = prior.f0.grid
    lik = kernel.pdf(np.atleast_1d(x), grid.points)[0]
    joint = lik * prior.base_mass
    z = joint.sum()
    if not z > 0:
        raise ZeroMarginalError(x)
    mass = (prior.alpha * prior.base_mass + joint / z) / (prior.alpha + 1.0)
    return MixingDensity.from_mass(grid, mass)


def _loglik_matrix(x, grid, kernel):
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("data must be nonempty")
    return x, kernel.logpdf(x, grid.points)


def npb_exact_enumeration(data, prior: DPPrior, kernel: Kernel) -> MixingDensity:
    """Exact DP posterior mean for ``n <= 8`` observations.

    Sums over every assignment of observations to grid points, weighted by
    the Polya-urn prior and the likelihood.  Both the urn weights and
    ``E(f | theta_1..theta_n)`` depend on an assignment only through its
    count vector, so prefixes with equal counts are merged as the data are
    absorbed one at a time; the result equals the full ``d**n`` sum.
    """
    x, lp = _loglik_matrix(data, prior.f0.grid, kernel)
    n = x.size
    if n > ENUM_MAX_N:
        raise ValueError(f"exact enumeration needs n <= {ENUM_MAX_N}, got {n}")
    a = prior.alpha
    base = prior.base_mass
    d = base.size
    with np.errstate(divide="ignore"):
        lbase = np.log(a * base)
    # state: count vector -> log total weight of prefixes with those counts
    states = {(0,) * d: 0.0}
    for i in range(n):
        nxt: dict = {}
        for counts, lw in states.items():
            c = np.asarray(counts, dtype=float)
            with np.errstate(divide="ignore"):
                urn = np.logaddexp(lbase, np.log(c)) - math.log(a + i)
            step = urn + lp[i]
            for k in np.flatnonzero(np.isfinite(step)):
                key = counts[:k] + (counts[k] + 1,) + counts[k + 1 :]
                v = lw + step[k]
                nxt[key] = np.logaddexp(nxt[key], v) if key in nxt else v
        states = nxt
        if not states:
            raise ZeroMarginalError(x[i])
    keys = np.array(list(states.keys()), dtype=float)
    lw = np.array(list(states.values()))
    p = np.exp(lw - logsumexp(lw))
    mass = (a * base + p @ keys) / (a + n)
    return MixingDensity.from_mass(prior.f0.grid, mass)


@dataclass
class SISResult:
    estimate: MixingDensity
    se: np.ndarray
    ess: float
    log_evidence: float
    n_resample: int = 0
    meta: dict = field(default_factory=dict)


def npb_sequential_imputation(
    data,
    prior: DPPrior,
    kernel: Kernel,
    n_particles: int,
    rng,
    resample: bool = False,
    ess_threshold: float = 0.5,
) -> SISResult:
    """DP posterior mean by sequential imputation.

    Each particle carries the counts of its imputed assignments.  At step
    ``i`` the importance weight gains the urn predictive density of ``x_i``
    and ``theta_i`` is drawn from ``p(x_i|theta) (alpha f0 + counts)``.  The
    estimate averages ``(alpha f0 + counts) / (alpha + n)`` over particles;
    ``se`` is the per-coordinate standard error of that self-normalised
    average (in mass units).  Weights stay in the log domain; ``resample``
    enables multinomial resampling when the effective sample size drops
    below ``ess_threshold * N``.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    x, lp = _loglik_matrix(data, prior.f0.grid, kernel)
    n = x.size
    a = prior.alpha
    base = prior.base_mass
    d = base.size
    N = int(n_particles)
    counts = np.zeros((N, d))
    logw = np.zeros(N)
    shift = lp.max(axis=1)
    lik = np.exp(lp - shift[:, None])
    n_res = 0
    log_ev = 0.0
    for i in range(n):
        joint = (a * base[None, :] + counts) * lik[i][None, :]
        pred = joint.sum(axis=1)
        if not np.any(pred > 0):
            raise ZeroMarginalError(x[i])
        with np.errstate(divide="ignore"):
            logw = logw + np.log(pred) + shift[i] - math.log(a + i)
        if not np.any(np.isfinite(logw)):
            raise ArithmeticError("all importance weights underflowed; increase N or enable resampling")
        cdf = np.cumsum(joint, axis=1)
        u = rng.random(N) * cdf[:, -1]
        k = np.minimum((cdf < u[:, None]).sum(axis=1), d - 1)
        counts[np.arange(N), k] += 1
        if resample and i < n - 1:
            wn = np.exp(logw - logsumexp(logw))
            if 1.0 / np.sum(wn**2) < ess_threshold * N:
                log_ev += float(logsumexp(logw) - math.log(N))
                idx = rng.choice(N, size=N, p=wn)
                counts = counts[idx]
                logw = np.zeros(N)
                n_res += 1
    wn = np.exp(logw - logsumexp(logw))
    log_ev += float(logsumexp(logw) - math.log(N))
    g = (a * base[None, :] + counts) / (a + n)
    est = wn @ g
    se = np.sqrt(np.sum(wn[:, None] ** 2 * (g - est[None, :]) ** 2, axis=0))
    return SISResult(
        estimate=MixingDensity.from_mass(prior.f0.grid, est),
        se=se,
        ess=float(1.0 / np.sum(wn**2)),
        log_evidence=log_ev,
        n_resample=n_res,
        meta={"n_particles": N, "resample": resample},
    )


# ---------------------------------------------------------------------------
# EM for two normal components with unknown means
# ---------------------------------------------------------------------------


def two_component_em(x, mu0, lam, sigma, n_iters=None, tol=1e-10, max_iters=10_000):
    """EM for ``lam N(mu1, sigma^2) + (1 - lam) N(mu2, sigma^2)``.

    Runs exactly ``n_iters`` iterations when given, otherwise until the
    change in the means is below ``tol``.  Returns ``(mus, logliks)`` with
    the starting point in row 0.
    """
    x = np.asarray(x, dtype=float).ravel()
    mu = np.array(mu0, dtype=float)

    def dens(m):
        a = lam * np.exp(-0.5 * ((x - m[0]) / sigma) ** 2)
        b = (1 - lam) * np.exp(-0.5 * ((x - m[1]) / sigma) ** 2)
        return a, b

    def loglik(m):
        a, b = dens(m)
        return float(np.sum(np.log(a + b)) - x.size * math.log(sigma * math.sqrt(2 * math.pi)))

    mus, lls = [mu.copy()], [loglik(mu)]
    limit = n_iters if n_iters is not None else max_iters
    for _ in range(limit):
        a, b = dens(mu)
        r = a / (a + b)
        new = mu.copy()
        if r.sum() > 0:
            new[0] = np.dot(r, x) / r.sum()
        if (1 - r).sum() > 0:
            new[1] = np.dot(1 - r, x) / (1 - r).sum()
        done = np.max(np.abs(new - mu)) < tol
        mu = new
        mus.append(mu.copy())
        lls.append(loglik(mu))
        if n_iters is None and done:
            break
    return np.array(mus), np.array(lls)
