"""Small stochastic-approximation drivers.

* running mean as an SA sequence,
* quantiles of Student's t via its normal scale-mixture form,
* a recursive empirical-Bayes estimate for the Poisson-exponential model,
* adaptive Metropolis (moment recursions driving the proposal covariance),
* SAEM for a two-component normal mixture with unknown means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import stats
from scipy.special import ndtr

from .core_sa import Trace, WeightSchedule, box, run_sa


# ---------------------------------------------------------------------------
# running mean
# ---------------------------------------------------------------------------


def running_mean_sa(z, x0=0.0):
    """Sample means of ``z`` written as ``x_n = x_{n-1} + (1/n)(Z_n - x_{n-1})``."""
    z = np.asarray(z, dtype=float).ravel()
    sched = WeightSchedule("power", a=1.0, gamma=1.0)
    return run_sa([x0], sched, lambda x, n, rng: z[n - 1] - x, z.size)


# ---------------------------------------------------------------------------
# t quantiles
# ---------------------------------------------------------------------------


def t_quantile_default_schedule():
    """``w_n = n**-0.6``.

    The drift slope at the root is ``-F_nu'(x*)``, about ``-0.28`` for
    ``alpha = 0.75, nu = 5``; with ``w_n = 1/n`` that gain is below 1/2 and
    the iterates approach the root only like ``n**-0.28``.
    """
    return WeightSchedule("power", a=1.0, gamma=0.6)


def t_quantile_root(alpha, nu, tol=1e-9):
    """Solve ``F_nu(x) = alpha`` by bisection on the t cdf."""
    lo, hi = -1.0, 1.0
    while stats.t.cdf(lo, nu) > alpha:
        lo *= 2
    while stats.t.cdf(hi, nu) < alpha:
        hi *= 2
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if stats.t.cdf(mid, nu) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def t_quantile_observation(x, z, nu, alpha):
    """``alpha - Phi(x sqrt(Z / nu))``; mean ``alpha - F_nu(x)`` for ``Z ~ chi2_nu``.

    ``Phi(x sqrt(Z/nu))`` is the ``N(0, nu/Z)`` cdf at ``x``: a t variable is a
    standard normal divided by ``sqrt(Z/nu)``.
    """
    return alpha - ndtr(x * np.sqrt(z / nu))


def t_quantile_sa(alpha, nu, x0, schedule: Optional[WeightSchedule], n, rng) -> Trace:
    """Robbins-Monro search for the ``alpha`` quantile of ``t_nu``."""
    schedule = schedule if schedule is not None else t_quantile_default_schedule()
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if nu < 1:
        raise ValueError("nu must be >= 1")
    zs = rng.chisquare(nu, size=n)

    def observe(x, i, _rng):
        return t_quantile_observation(x, zs[i - 1], nu, alpha)

    tr = run_sa([x0], schedule, observe, n)
    tr.meta.update(alpha=alpha, nu=nu, x0=x0)
    return tr


# ---------------------------------------------------------------------------
# empirical Bayes, Poisson counts with exponential rates
# ---------------------------------------------------------------------------

EB_BOX = (1e-6, 1e6)


def eb_default_schedule():
    """``w_n = min(0.1, 10/n)``.

    Early steps of size 1/2 can carry the iterate through zero; the clamp at
    ``1e-6`` then makes the ``1/x`` term throw it far out, where the drift is
    too weak to return.
    """
    return WeightSchedule("plateau", w0=0.1, n0=10.0)


def eb_h(x, xi):
    """Mean drift ``(xi - x) / (xi x (x + 1))``."""
    return (xi - x) / (xi * x * (x + 1.0))


def eb_observation(x, z):
    """Bracketed increment ``1/x - (Z + 1)/(x + 1)``."""
    return 1.0 / x - (z + 1.0) / (x + 1.0)


def eb_poisson_exp_sa(xi_true, x0, schedule: Optional[WeightSchedule], n, rng) -> Trace:
    """Recursive estimate of the exponential rate ``xi`` from Poisson counts.

    ``lambda_i ~ Exp(rate xi)``, ``Z_i ~ Poisson(lambda_i)``.  Iterates are
    kept in ``[1e-6, 1e6]``; ``meta["projections"]`` counts clamps.
    """
    if xi_true <= 0 or x0 <= 0:
        raise ValueError("xi_true and x0 must be positive")
    schedule = schedule if schedule is not None else eb_default_schedule()
    lam = rng.exponential(1.0 / xi_true, size=n)
    counts = rng.poisson(lam).astype(float)
    tr = run_sa([x0], schedule, lambda x, i, _rng: eb_observation(x, counts[i - 1]), n, c=box(*EB_BOX))
    tr.meta.update(xi_true=xi_true, projections=int(np.count_nonzero(tr.z)))
    return tr


# ---------------------------------------------------------------------------
# adaptive Metropolis
# ---------------------------------------------------------------------------

AM_EPS = 1e-8


def am_scale(p):
    """Proposal scale ``2.4**2 / p``."""
    return 2.4**2 / p


@dataclass
class AMState:
    n: int
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    logp: float
    c: float
    accepted: int = 0
    rejected_nonfinite: int = 0


def am_init(z0, log_target, mu0=None, sigma0=None, c=None):
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    p = z0.size
    mu0 = z0.copy() if mu0 is None else np.atleast_1d(np.asarray(mu0, dtype=float))
    sigma0 = np.eye(p) if sigma0 is None else np.atleast_2d(np.asarray(sigma0, dtype=float))
    lp = float(log_target(z0))
    if not np.isfinite(lp):
        raise ValueError("target is not finite at the starting point")
    return AMState(0, mu0, sigma0, z0, lp, am_scale(p) if c is None else c)


def am_moments(mu, sigma, z, w):
    """``Sigma_n`` uses the previous mean ``mu_{n-1}``; then ``mu_n``."""
    dz = z - mu
    sigma_new = (1 - w) * sigma + w * np.outer(dz, dz)
    mu_new = (1 - w) * mu + w * z
    return mu_new, sigma_new


def am_step(state: AMState, log_target, w, rng, normal=None, u=None, eps=AM_EPS) -> AMState:
    """One Metropolis move with proposal ``N(z, c Sigma + eps I)``, then both moment updates.

    The moments are updated with the post-move position whether or not the
    proposal was accepted.  ``normal`` and ``u`` may carry pre-drawn
    standard normals and a uniform.
    """
    p = state.z.size
    cov = state.c * state.sigma + eps * np.eye(p)
    cov = 0.5 * (cov + cov.T)
    L = np.linalg.cholesky(cov)
    e = rng.standard_normal(p) if normal is None else normal
    prop = state.z + L @ e
    lp_prop = float(log_target(prop))
    u = rng.random() if u is None else u
    z, lp, acc, bad = state.z, state.logp, state.accepted, state.rejected_nonfinite
    if not np.isfinite(lp_prop):
        bad += 1
    elif lp_prop >= lp or u < math.exp(lp_prop - lp):
        z, lp, acc = prop, lp_prop, acc + 1
    mu, sigma = am_moments(state.mu, state.sigma, z, w)
    return AMState(state.n + 1, mu, sigma, z, lp, state.c, acc, bad)


@dataclass
class AMRun:
    mus: np.ndarray
    sigma: np.ndarray
    sigmas: np.ndarray
    acceptance: float
    rejected_nonfinite: int
    meta: dict = field(default_factory=dict)

    @property
    def mu(self):
        return self.mus[-1]


def run_am(log_target, z0, n, rng, schedule=None, mu0=None, sigma0=None, keep_every=100) -> AMRun:
    """Adaptive Metropolis for ``n`` iterations.

    ``mus`` holds every ``mu_n``; covariances are thinned by ``keep_every``.
    """
    schedule = schedule if schedule is not None else WeightSchedule("harmonic")
    state = am_init(z0, log_target, mu0, sigma0)
    p = state.z.size
    w = schedule.weights(n)
    normals = rng.standard_normal((n, p))
    unif = rng.random(n)
    mus = np.empty((n + 1, p))
    mus[0] = state.mu
    sigmas = [state.sigma.copy()]
    for i in range(n):
        state = am_step(state, log_target, w[i], rng, normals[i], unif[i])
        mus[i + 1] = state.mu
        if (i + 1) % keep_every == 0:
            sigmas.append(state.sigma.copy())
    return AMRun(
        mus=mus,
        sigma=state.sigma,
        sigmas=np.array(sigmas),
        acceptance=state.accepted / n,
        rejected_nonfinite=state.rejected_nonfinite,
        meta={"c": state.c, "eps": AM_EPS, "schedule": schedule.to_dict()},
    )


def gaussian_log_target(mean, cov):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    prec = np.linalg.inv(np.atleast_2d(np.asarray(cov, dtype=float)))

    def logp(z):
        dz = z - mean
        return -0.5 * float(dz @ prec @ dz)

    return logp


# ---------------------------------------------------------------------------
# SAEM, two normal components with unknown means
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SAEMToyModel:
    """``lam N(mu_1, sigma^2) + (1 - lam) N(mu_2, sigma^2)``, ``lam`` and ``sigma`` known."""

    lam: float = 0.5
    sigma: float = 1.0

    def responsibilities(self, x, mu):
        """Probability each point belongs to component 1."""
        x = np.asarray(x, dtype=float)
        l1 = math.log(self.lam) - 0.5 * ((x - mu[0]) / self.sigma) ** 2
        l2 = math.log1p(-self.lam) - 0.5 * ((x - mu[1]) / self.sigma) ** 2
        return np.exp(l1 - np.logaddexp(l1, l2))

    def loglik(self, x, mu):
        x = np.asarray(x, dtype=float)
        c = -math.log(self.sigma) - 0.5 * math.log(2 * math.pi)
        l1 = math.log(self.lam) - 0.5 * ((x - mu[0]) / self.sigma) ** 2
        l2 = math.log1p(-self.lam) - 0.5 * ((x - mu[1]) / self.sigma) ** 2
        return float(np.sum(np.logaddexp(l1, l2) + c))

    def sample(self, n, mu, rng):
        lab = rng.random(n) < self.lam
        return np.where(lab, mu[0], mu[1]) + self.sigma * rng.standard_normal(n), lab


def saem_stats(labels, x):
    """Complete-data sufficient statistics ``(n_1, sum_1, n_2, sum_2)`` per label vector (True = component 1)."""
    labels = np.atleast_2d(labels).astype(float)
    n1 = labels.sum(axis=1)
    s1 = labels @ x
    return np.column_stack([n1, s1, x.size - n1, x.sum() - s1])


def saem_m_step(S, mu_prev):
    """Closed-form maximiser; a component with no weight keeps its mean."""
    mu = np.array(mu_prev, dtype=float)
    if S[0] > 0:
        mu[0] = S[1] / S[0]
    if S[2] > 0:
        mu[1] = S[3] / S[2]
    return mu


@dataclass
class SAEMRun:
    mus: np.ndarray
    stats: np.ndarray
    loglik: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def mu(self):
        return self.mus[-1]


def run_saem(
    model: SAEMToyModel,
    data,
    schedule: WeightSchedule,
    n_iters,
    rng=None,
    mu0=(-1.0, 1.0),
    m_rule: Union[int, Callable[[int], int]] = 1,
    exact=False,
) -> SAEMRun:
    """SAEM iterations.

    Each step draws ``m_n`` label vectors from ``p(labels | x, mu_n)`` (or
    uses their exact expectation when ``exact``), blends the averaged
    sufficient statistics with weight ``w_n`` and maximises in closed form.
    """
    x = np.asarray(data, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("data must be nonempty")
    mu = np.asarray(mu0, dtype=float)
    w = schedule.weights(n_iters)
    S = np.zeros(4)
    mus = np.empty((n_iters + 1, 2))
    all_S = np.empty((n_iters, 4))
    ll = np.empty(n_iters + 1)
    mus[0], ll[0] = mu, model.loglik(x, mu)
    for n in range(1, n_iters + 1):
        resp = model.responsibilities(x, mu)
        if exact:
            s_new = np.array([resp.sum(), resp @ x, x.size - resp.sum(), x.sum() - resp @ x])
        else:
            m = m_rule(n) if callable(m_rule) else int(m_rule)
            labels = rng.random((m, x.size)) < resp[None, :]
            s_new = saem_stats(labels, x).mean(axis=0)
        S = (1 - w[n - 1]) * S + w[n - 1] * s_new
        mu = saem_m_step(S, mu)
        mus[n], all_S[n - 1], ll[n] = mu, S, model.loglik(x, mu)
    return SAEMRun(mus, all_S, ll, {"exact": exact, "schedule": schedule.to_dict()})
