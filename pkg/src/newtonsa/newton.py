"""Newton's recursive estimate of a mixing distribution.

One pass through the data,

    f_i = (1 - w_i) f_{i-1} + w_i * posterior(f_{i-1}; X_i),

which is the Robbins-Monro step ``f_i = f_{i-1} + w_i H(X_i, f_{i-1})``
with ``H`` the posterior-minus-prior map.  Its mean drift ``h`` has the true
mixing density as a fixed point, and the Kullback-Leibler divergence
``l(phi) = K(f, phi)`` is a Lyapunov function for ``phi' = h(phi)``.  The
drift, the fixed-point map and the Lyapunov quantities need the true ``f``
and are meant for simulation studies.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core_sa import WeightSchedule
from .mixture import (
    Kernel,
    MixingDensity,
    XQuadrature,
    ZeroMarginalError,
    kl_marginal,
    kl_theta,
    log_marginal,
    posterior_mass_matrix,
    quadrature_for,
)


def _posterior_mass(mass, loglik_row, x):
    p = np.exp(loglik_row - loglik_row.max())
    pm = p * mass
    z = pm.sum()
    if not z > 0 or not np.isfinite(loglik_row.max()):
        raise ZeroMarginalError(x)
    return pm / z


def H_map(x, phi: MixingDensity, kernel: Kernel):
    """Posterior density minus prior density at one observation."""
    pm = posterior_mass_matrix(kernel.logpdf(np.atleast_1d(x), phi.grid.points), _log(phi.mass), np.atleast_1d(x))[0]
    return pm / phi.grid.weights - phi.values


def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def newton_update(f_prev: MixingDensity, x, w, kernel: Kernel) -> MixingDensity:
    """One step of the recursion, written as ``f + w H(x, f)``."""
    if not 0.0 < w <= 1.0:
        raise ValueError(f"weight {w} outside (0, 1]")
    return MixingDensity(f_prev.grid, f_prev.values + w * H_map(x, f_prev, kernel))


@dataclass
class NewtonRun:
    """Output of :func:`run_newton`.

    ``masses[i]`` holds the masses of ``f_i`` (row 0 is ``f_0``) when the full
    path was kept, otherwise only the rows listed in ``steps``.
    """

    final: MixingDensity
    steps: np.ndarray
    masses: np.ndarray
    weights: np.ndarray
    kl_theta: Optional[np.ndarray] = None
    kl_marginal: Optional[np.ndarray] = None
    order_hash: str = ""
    meta: dict = field(default_factory=dict)

    def density(self, row):
        return MixingDensity.from_mass(self.final.grid, self.masses[row])


def data_order_hash(data):
    arr = np.ascontiguousarray(np.asarray(data, dtype=float))
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def run_newton(
    data,
    kernel: Kernel,
    f0: MixingDensity,
    schedule: Optional[WeightSchedule] = None,
    f_true: Optional[MixingDensity] = None,
    quad: Optional[XQuadrature] = None,
    stride: int = 1,
    record: Optional[list] = None,
) -> NewtonRun:
    """Apply the recursion to ``data`` in the order given.

    ``stride`` thins the stored path; ``record`` lists explicit steps to keep
    instead.  When ``f_true`` is supplied the divergences ``K(f, f_i)`` and
    ``K(Pi_f, Pi_{f_i})`` are computed at the stored steps.
    """
    data = np.asarray(data, dtype=float).ravel()
    n = data.size
    if n == 0:
        raise ValueError("data must be nonempty")
    schedule = schedule if schedule is not None else WeightSchedule("harmonic")
    grid = f0.grid
    w = schedule.weights(n)
    if np.any(w <= 0) or np.any(w > 1):
        raise ValueError("weights must lie in (0, 1]")
    loglik = kernel.logpdf(data, grid.points)
    keep = set(record) if record is not None else set(range(0, n + 1, stride)) | {n}
    steps = sorted(k for k in keep if 0 <= k <= n)
    out = np.empty((len(steps), grid.d))
    j = 0
    mass = f0.mass.copy()
    if steps[0] == 0:
        out[0] = mass
        j = 1
    for i in range(n):
        try:
            pm = _posterior_mass(mass, loglik[i], data[i])
        except ZeroMarginalError as exc:
            err = ZeroMarginalError(data[i])
            err.iteration = i + 1
            raise err from exc
        mass = mass + w[i] * (pm - mass)
        if j < len(steps) and steps[j] == i + 1:
            out[j] = mass
            j += 1
    final = MixingDensity.from_mass(grid, mass)
    run = NewtonRun(
        final=final,
        steps=np.asarray(steps),
        masses=out,
        weights=w,
        order_hash=data_order_hash(data),
        meta={"n": n, "schedule": schedule.to_dict(), "kernel": kernel.to_dict()},
    )
    if f_true is not None:
        quad = quad if quad is not None else quadrature_for(kernel, grid)
        run.kl_theta = np.array([kl_theta(f_true, run.density(r)) for r in range(len(steps))])
        run.kl_marginal = np.array([kl_marginal(f_true, run.density(r), kernel, quad) for r in range(len(steps))])
    return run


def write_trace(path, run: NewtonRun):
    """Trace CSV: ``n, f_1..f_d, kl_theta, kl_marginal``."""
    d = run.masses.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n"] + [f"f_{k + 1}" for k in range(d)] + ["kl_theta", "kl_marginal"])
        for r, step in enumerate(run.steps):
            kt = "" if run.kl_theta is None else repr(float(run.kl_theta[r]))
            km = "" if run.kl_marginal is None else repr(float(run.kl_marginal[r]))
            wr.writerow([int(step)] + [repr(float(v)) for v in run.masses[r]] + [kt, km])


# ---------------------------------------------------------------------------
# mean drift and fixed-point map
# ---------------------------------------------------------------------------


def _node_terms(phi, f_true, kernel, quad):
    lp = kernel.logpdf(quad.nodes, phi.grid.points)
    lf = log_marginal(f_true, kernel, quad.nodes)
    lphi = log_marginal(phi, kernel, quad.nodes)
    pf = np.exp(lf)
    bad = (pf > 0) & ~np.isfinite(lphi)
    if np.any(bad):
        raise ZeroMarginalError(quad.nodes[np.flatnonzero(bad)[0]])
    return lp, lf, lphi


def T_values(phi: MixingDensity, f_true: MixingDensity, kernel: Kernel, quad: XQuadrature):
    """``T(phi)_k = phi_k * int Pi_f(x) / Pi_phi(x) p(x|theta_k) dnu(x)``."""
    lp, lf, lphi = _node_terms(phi, f_true, kernel, quad)
    ratio = np.where(np.isfinite(lf), np.exp(lf - np.where(np.isfinite(lphi), lphi, 0.0)), 0.0)
    integral = (quad.weights * ratio) @ np.exp(lp)
    return phi.values * integral


def h_map(phi: MixingDensity, f_true: MixingDensity, kernel: Kernel, quad: XQuadrature):
    """Mean drift ``h(phi) = E_f H(X, phi)`` by quadrature over ``x``."""
    return T_values(phi, f_true, kernel, quad) - phi.values


def T_map(phi: MixingDensity, f_true: MixingDensity, kernel: Kernel, quad: XQuadrature) -> MixingDensity:
    """Fixed-point map ``T(phi) = phi + h(phi)``; ``T(f) = f``."""
    return MixingDensity(phi.grid, phi.values + h_map(phi, f_true, kernel, quad))


# ---------------------------------------------------------------------------
# Lyapunov diagnostics
# ---------------------------------------------------------------------------


def lyapunov_value(f_true, phi):
    """``l(phi) = K(f, phi)``."""
    return kl_theta(f_true, phi)


def lyapunov_gradient(f_true, phi):
    """Gradient ``-(r_1..r_d) + r_s * I_s`` of ``l`` with ``r_k = f_k / phi_k``.

    Coordinates are masses.  ``s`` is the last coordinate where ``f`` is
    positive and ``I_s`` the indicator of the positive coordinates; the
    result is the gradient in coordinates where ``phi_s`` absorbs the
    simplex constraint on the face containing ``f``.  Zero coordinates of
    ``f`` get zero partial derivatives.
    """
    fm = f_true.mass if isinstance(f_true, MixingDensity) else np.asarray(f_true, dtype=float)
    pm = phi.mass if isinstance(phi, MixingDensity) else np.asarray(phi, dtype=float)
    pos = fm > 0
    if np.any(pm[pos] <= 0):
        raise ValueError("gradient undefined: phi vanishes where f is positive")
    r = np.zeros_like(fm)
    r[pos] = fm[pos] / pm[pos]
    # positive coordinates first: the anchor is the last of them
    s = np.flatnonzero(pos)[-1]
    grad = -r
    grad[pos] += r[s]
    return grad


def lyapunov_time_derivative(f_true, phi, kernel, quad):
    """``dl/dt = 1 - int Pi_f**2 / Pi_phi dnu`` along ``phi' = h(phi)``."""
    _, lf, lphi = _node_terms(phi, f_true, kernel, quad)
    keep = np.isfinite(lf)
    return float(1.0 - np.sum(quad.weights[keep] * np.exp(2 * lf[keep] - lphi[keep])))


@dataclass
class LyapunovReport:
    phi: MixingDensity
    value: float
    gradient: np.ndarray
    time_derivative: float
    chain_rule: float
    jensen_slack: float


def lyapunov_report(f_true, phi, kernel, quad) -> LyapunovReport:
    """All Lyapunov quantities at one ``phi``.

    ``chain_rule`` is ``grad l . h`` (mass coordinates) and ``jensen_slack``
    the gap ``(1 - 1/int Pi_phi) - dl/dt``, nonnegative by Jensen.
    """
    ldot = lyapunov_time_derivative(f_true, phi, kernel, quad)
    grad = lyapunov_gradient(f_true, phi)
    h_mass = h_map(phi, f_true, kernel, quad) * phi.grid.weights
    mphi = float(quad.integrate(np.exp(log_marginal(phi, kernel, quad.nodes))))
    return LyapunovReport(
        phi=phi,
        value=lyapunov_value(f_true, phi),
        gradient=grad,
        time_derivative=ldot,
        chain_rule=float(grad @ h_mass),
        jensen_slack=(1.0 - 1.0 / mphi) - ldot,
    )


# ---------------------------------------------------------------------------
# Markov chain representation
# ---------------------------------------------------------------------------


def markov_marginal_sample(data, f0: MixingDensity, kernel: Kernel, rng, n_chains=10_000, schedule=None):
    """Empirical law of ``Z_n`` for the chain whose marginals are the ``f_i``.

    ``Z_0 ~ f_0``; at step ``i`` the chain stays put with probability
    ``1 - w_i`` and otherwise jumps to ``Y_i`` drawn from the posterior
    ``p(X_i | theta) f_{i-1}(theta)``.  Returns the empirical masses of
    ``Z_n`` as a :class:`MixingDensity`.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    data = np.asarray(data, dtype=float).ravel()
    d = f0.d
    z = rng.choice(d, size=n_chains, p=f0.mass)
    if data.size:
        schedule = schedule if schedule is not None else WeightSchedule("harmonic")
        run = run_newton(data, kernel, f0, schedule)
        w = run.weights
        loglik = kernel.logpdf(data, f0.grid.points)
        for i in range(data.size):
            post = _posterior_mass(run.masses[i], loglik[i], data[i])
            jump = rng.random(n_chains) < w[i]
            k = int(jump.sum())
            if k:
                z[jump] = rng.choice(d, size=k, p=post)
    counts = np.bincount(z, minlength=d).astype(float)
    return MixingDensity.from_mass(f0.grid, counts)


def total_variation(p: MixingDensity, q: MixingDensity):
    return 0.5 * float(np.abs(p.mass - q.mass).sum())
