"""Newton + plug-in: joint recursive estimation of a mixing density and a variance.

Rows ``X_i = (X_i1, ..., X_ir)`` are i.i.d. ``N(theta_i, xi)`` given a latent
``theta_i ~ f``.  Each step first refreshes the variance estimate from the
new row, then takes a Newton step for ``f`` using the refreshed variance,
projecting both onto compact sets:

    xi_i = Proj_box( ((i - 1) xi_{i-1} + s2_i) / i )
    f_i  = Proj_floor( f_{i-1} + w_i H(X_i; f_{i-1}, xi_i) )

where ``s2_i`` is the sample variance of row ``i``.  The Bayes variant swaps
``xi_i`` for the posterior mean of ``sigma**2`` under the ``1/sigma**2`` prior,
which needs the pooled sum of squares and is therefore not recursive in
``(f, xi)`` alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .core_sa import WeightSchedule, box, floored_simplex, project
from .mixture import MixingDensity, NormalUnknownVariance, ThetaGrid, ZeroMarginalError, posterior_mass_matrix

DEFAULT_FLOOR = 1e-4
DEFAULT_XI_BOX = (1e-4, 1e4)


class UnderflowError(ArithmeticError):
    """All joint replicate densities vanished."""


# ---------------------------------------------------------------------------
# variance plug-ins
# ---------------------------------------------------------------------------


def row_ss(row):
    """Within-row sum of squares about the row mean."""
    row = np.asarray(row, dtype=float)
    return float(np.sum((row - row.mean()) ** 2))


def ube_update(prev_xi, i, row):
    """Running mean of per-row sample variances (unbiased for ``sigma**2``)."""
    row = np.asarray(row, dtype=float)
    r = row.size
    if r < 2:
        raise ValueError("sample variance needs r >= 2 replicates")
    if i < 1:
        raise ValueError("rows are numbered from 1")
    s2 = row_ss(row) / (r - 1)
    return ((i - 1) * prev_xi + s2) / i


def bayes_update(i, pooled_ss, r):
    """Posterior mean of ``sigma**2``: ``pooled_ss / (i (r - 1) - 2)``."""
    dof = i * (r - 1) - 2
    if dof <= 0:
        raise ValueError(f"posterior mean undefined: i(r-1) = {i * (r - 1)} <= 2")
    return pooled_ss / dof


# ---------------------------------------------------------------------------
# the replicated-row H map
# ---------------------------------------------------------------------------


def H_rep(row, phi_mass, psi, thetas, form="sufficient"):
    """Posterior-minus-prior masses for one replicated row at variance ``psi``.

    ``form="sufficient"`` evaluates the row mean under ``N(theta, psi / r)``;
    ``form="full"`` uses the joint density of all ``r`` draws.  Both are
    computed in log space.  A 2-d ``row`` is a batch of rows and gives one
    output row each.
    """
    x = np.asarray(row, dtype=float)
    batch = x.ndim == 2
    rows = np.atleast_2d(x)
    thetas = np.asarray(thetas, dtype=float)
    phi_mass = np.asarray(phi_mass, dtype=float)
    if not psi > 0:
        raise ValueError("psi must be positive")
    r = rows.shape[1]
    if form == "sufficient":
        s = rows.mean(axis=1)
        ll = -0.5 * r * (s[:, None] - thetas[None, :]) ** 2 / psi
    elif form == "full":
        ll = NormalUnknownVariance().replicate_logpdf(rows, thetas, psi)
    else:
        raise ValueError(f"unknown form {form!r}")
    with np.errstate(divide="ignore"):
        log_mass = np.log(phi_mass)
    try:
        post = posterior_mass_matrix(ll, log_mass)
    except ZeroMarginalError as exc:
        bad = int(exc.x)
        raise UnderflowError(f"joint replicate densities vanish for row mean {float(rows[bad].mean())!r}") from None
    out = post - phi_mass[None, :]
    return out if batch else out[0]


def dH_dpsi_closed_form(s, phi_mass, psi, thetas, r):
    """Analytic ``dH_k/dpsi`` for the row-mean form.

    ``(r / 2 psi**2) * q_k * sum_j q_j u_kj(s)`` with ``q`` the posterior
    masses and ``u_kj(s) = theta_k**2 - theta_j**2 + 2 s (theta_j - theta_k)``.
    """
    thetas = np.asarray(thetas, dtype=float)
    with np.errstate(divide="ignore"):
        a = -0.5 * r * (s - thetas) ** 2 / psi + np.log(phi_mass)
    q = np.exp(a - logsumexp(a))
    u = u_kj(s, thetas)
    return r / (2 * psi**2) * q * (u @ q)


def u_kj(s, thetas):
    """Matrix ``u[k, j] = theta_k**2 - theta_j**2 + 2 s (theta_j - theta_k)``."""
    t = np.asarray(thetas, dtype=float)
    return t[:, None] ** 2 - t[None, :] ** 2 + 2 * s * (t[None, :] - t[:, None])


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


@dataclass
class NPState:
    """Iterate of the N+P recursion."""

    n: int
    f: np.ndarray
    xi: float
    pooled_ss: float = 0.0
    proj_simplex: int = 0
    proj_box: int = 0


@dataclass(frozen=True)
class NPConfig:
    thetas: np.ndarray
    floor: float = DEFAULT_FLOOR
    xi_box: tuple = DEFAULT_XI_BOX
    estimator: str = "ube"

    def __post_init__(self):
        if self.estimator not in ("ube", "bayes"):
            raise ValueError(f"estimator must be 'ube' or 'bayes', got {self.estimator!r}")


def npp_step(state: NPState, row, w, cfg: NPConfig) -> NPState:
    """One N+P step: variance first, then the projected Newton step with it."""
    row = np.asarray(row, dtype=float)
    r = row.size
    i = state.n + 1
    ss = state.pooled_ss + row_ss(row)
    # the unbiased recursion is carried in both variants (warm-up for bayes)
    if cfg.estimator == "bayes" and i * (r - 1) > 2:
        xi_raw = bayes_update(i, ss, r)
    else:
        xi_raw = ube_update(state.xi, i, row)
    lo, hi = cfg.xi_box
    xi = float(project(box(lo, hi), np.array([xi_raw]))[0])
    raw = state.f + w * H_rep(row, state.f, xi, cfg.thetas)
    fired = bool(np.any(raw < cfg.floor))
    f = project(floored_simplex(cfg.floor), raw) if fired else raw
    return NPState(
        n=i,
        f=f,
        xi=xi,
        pooled_ss=ss,
        proj_simplex=state.proj_simplex + fired,
        proj_box=state.proj_box + (xi != xi_raw),
    )


@dataclass
class NPPRun:
    final: MixingDensity
    xi: float
    steps: np.ndarray
    xis: np.ndarray
    masses: np.ndarray
    proj_simplex: np.ndarray
    proj_box: np.ndarray
    meta: dict = field(default_factory=dict)


def run_npp(
    rows,
    grid: ThetaGrid,
    f0: Optional[MixingDensity] = None,
    schedule: Optional[WeightSchedule] = None,
    floor=DEFAULT_FLOOR,
    xi_box=DEFAULT_XI_BOX,
    estimator="ube",
    xi0=1.0,
) -> NPPRun:
    """Run the N+P recursion over the rows of ``rows`` (shape ``(n, r)``)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    n, r = rows.shape
    if n == 0:
        raise ValueError("data must be nonempty")
    if r < 2:
        raise ValueError("N+P needs r >= 2 replicates per row")
    schedule = schedule if schedule is not None else WeightSchedule("harmonic")
    f0 = f0 if f0 is not None else MixingDensity.uniform(grid)
    cfg = NPConfig(grid.points, floor, tuple(xi_box), estimator)
    start = project(floored_simplex(floor), f0.mass)
    state = NPState(0, start, float(project(box(*xi_box), np.array([xi0]))[0]))
    w = schedule.weights(n)
    xis = np.empty(n + 1)
    masses = np.empty((n + 1, grid.d))
    ps = np.zeros(n + 1, dtype=int)
    pb = np.zeros(n + 1, dtype=int)
    xis[0], masses[0] = state.xi, state.f
    for i in range(n):
        try:
            state = npp_step(state, rows[i], w[i], cfg)
        except (ValueError, ArithmeticError) as exc:
            raise type(exc)(f"row {i + 1}: {exc}") from exc
        xis[i + 1], masses[i + 1] = state.xi, state.f
        ps[i + 1], pb[i + 1] = state.proj_simplex, state.proj_box
    return NPPRun(
        final=MixingDensity.from_mass(grid, state.f),
        xi=state.xi,
        steps=np.arange(n + 1),
        xis=xis,
        masses=masses,
        proj_simplex=ps,
        proj_box=pb,
        meta={
            "estimator": estimator,
            "recursive": estimator == "ube",
            "r": r,
            "floor": floor,
            "xi_box": list(xi_box),
            "schedule": schedule.to_dict(),
        },
    )


def write_trace(path, run: NPPRun):
    """Trace CSV: ``n, xi, f_1..f_d, proj_simplex_count, proj_box_count``."""
    d = run.masses.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n", "xi"] + [f"f_{k + 1}" for k in range(d)] + ["proj_simplex_count", "proj_box_count"])
        for j, step in enumerate(run.steps):
            wr.writerow(
                [int(step), repr(float(run.xis[j]))]
                + [repr(float(v)) for v in run.masses[j]]
                + [int(run.proj_simplex[j]), int(run.proj_box[j])]
            )


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@dataclass
class BoundScan:
    """Result of :func:`np4_bound_scan`, indexed by mixture component ``k``."""

    s: np.ndarray
    profile: np.ndarray  # (d, n_s): sup over phi and psi of |dH_k/dpsi| at each s
    sup: np.ndarray
    argmax_s: np.ndarray
    boundary_lo: np.ndarray
    boundary_hi: np.ndarray

    def interior_max(self):
        s_max = np.abs(self.s).max()
        return np.abs(self.argmax_s) < s_max

    def boundary_ratio(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.sup > 0, np.maximum(self.boundary_lo, self.boundary_hi) / self.sup, 0.0)


def default_phi_grid(d, floor, n_random=40, seed=0):
    """Mixing weights to scan: uniform, near-corners and random Dirichlet draws, all in the floored simplex."""
    rng = np.random.default_rng(seed)
    phis = [np.full(d, 1.0 / d)]
    for k in range(d):
        corner = np.full(d, floor)
        corner[k] = 1.0 - (d - 1) * floor
        phis.append(corner)
    for _ in range(n_random):
        phis.append(project(floored_simplex(floor), rng.dirichlet(np.full(d, 0.5))))
    return np.array(phis)


def np4_bound_scan(
    thetas,
    r,
    floor=DEFAULT_FLOOR,
    psi_box=DEFAULT_XI_BOX,
    s_max=50.0,
    n_s=1001,
    n_psi=41,
    phis=None,
    rel_step=1e-4,
) -> BoundScan:
    """Numeric sup of ``|dH_k/dpsi|`` over a grid of ``(s, phi, psi)``.

    Derivatives are central differences with step ``rel_step * psi``.
    """
    thetas = np.asarray(thetas, dtype=float)
    d = thetas.size
    s = np.linspace(-s_max, s_max, n_s)
    psis = np.geomspace(psi_box[0], psi_box[1], n_psi)
    phis = default_phi_grid(d, floor) if phis is None else np.atleast_2d(phis)
    with np.errstate(divide="ignore"):
        logphi = np.log(phis)  # (P, d)
    profile = np.zeros((d, n_s))

    def H_all(psi):
        # (S, P, d)
        a = -0.5 * r * (s[:, None, None] - thetas[None, None, :]) ** 2 / psi + logphi[None, :, :]
        return np.exp(a - logsumexp(a, axis=2, keepdims=True)) - phis[None, :, :]

    for psi in psis:
        h = rel_step * psi
        deriv = (H_all(psi + h) - H_all(psi - h)) / (2 * h)
        profile = np.maximum(profile, np.abs(deriv).max(axis=1).T)
    idx = profile.argmax(axis=1)
    return BoundScan(
        s=s,
        profile=profile,
        sup=profile.max(axis=1),
        argmax_s=s[idx],
        boundary_lo=profile[:, 0],
        boundary_hi=profile[:, -1],
    )


def summability_partial_sums(schedule: WeightSchedule, n_max, start=3, chunk=1_000_000):
    """Partial sums of ``w_n u(n) / n`` with ``u(t) = sqrt(2 t log log t)``.

    Terms start at ``n = start`` (``log log n`` needs ``n > e``).  Returns
    ``(n, partial_sums)`` evaluated at every ``n``.
    """
    ns = np.arange(start, n_max + 1, dtype=float)
    out = np.empty_like(ns)
    total = 0.0
    for lo in range(0, ns.size, chunk):
        nn = ns[lo : lo + chunk]
        terms = schedule(nn) * np.sqrt(2 * nn * np.log(np.log(nn))) / nn
        cs = np.cumsum(terms) + total
        out[lo : lo + chunk] = cs
        total = cs[-1]
    return ns.astype(np.int64), out
