"""Mixing densities on a finite parameter grid and the mixtures they induce.

A mixing density ``f`` lives on a :class:`ThetaGrid` of points
``theta_1 < ... < theta_d`` with measure weights ``mu_k`` (all ones for
counting measure, trapezoid weights when the grid stands in for an
interval).  The induced marginal is

    Pi_f(x) = sum_k p(x | theta_k) f_k mu_k.

Kernels expose ``logpdf(x, thetas)`` returning the ``(len(x), d)`` matrix of
log sampling densities; everything downstream works from that matrix in log
space so products of replicate densities and far tails do not underflow.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid
from scipy.special import gammaln, logsumexp

MASS_TOL = 1e-10


class ZeroMarginalError(ArithmeticError):
    """The marginal density vanishes at an observation."""

    def __init__(self, x):
        self.x = x
        shown = x.item() if isinstance(x, np.generic) else x
        super().__init__(f"marginal density is zero at x={shown!r}")


# ---------------------------------------------------------------------------
# grids and densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ThetaGrid:
    """Support points with measure weights."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_1d(np.asarray(self.points, dtype=float))
        wts = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if pts.shape != wts.shape or pts.ndim != 1:
            raise ValueError("points and weights must be 1-d arrays of equal length")
        if pts.size > 1 and np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        if np.any(wts <= 0):
            raise ValueError("measure weights must be positive")
        pts.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    @classmethod
    def counting(cls, points):
        points = np.asarray(points, dtype=float)
        return cls(points, np.ones_like(points))

    @classmethod
    def trapezoid(cls, a, b, m=201):
        """``m`` equispaced points on ``[a, b]`` with trapezoid weights."""
        pts = np.linspace(a, b, m)
        h = (b - a) / (m - 1)
        wts = np.full(m, h)
        wts[0] = wts[-1] = h / 2
        return cls(pts, wts)

    @property
    def d(self):
        return self.points.size

    def same_as(self, other):
        return self is other or (
            self.d == other.d
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.weights, other.weights)
        )


@dataclass(frozen=True, eq=False)
class MixingDensity:
    """Nonnegative density ``f_k`` on a grid with ``sum f_k mu_k = 1``."""

    grid: ThetaGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).copy()
        if v.shape != (self.grid.d,):
            raise ValueError(f"expected {self.grid.d} values, got shape {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("density values must be finite and nonnegative")
        total = float(v @ self.grid.weights)
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"density integrates to {total!r}, not 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_mass(cls, grid, mass):
        """Build from masses ``f_k mu_k`` (renormalised to sum to one)."""
        mass = np.asarray(mass, dtype=float)
        mass = mass / mass.sum()
        return cls(grid, mass / grid.weights)

    @classmethod
    def uniform(cls, grid):
        return cls.from_mass(grid, grid.weights)

    @classmethod
    def point_mass(cls, grid, k):
        mass = np.zeros(grid.d)
        mass[k] = 1.0
        return cls.from_mass(grid, mass)

    @property
    def mass(self):
        """Probability masses ``f_k mu_k``."""
        return self.values * self.grid.weights

    @property
    def d(self):
        return self.grid.d

    def mean(self):
        return float(self.mass @ self.grid.points)

    def var(self):
        m = self.mass
        mu = m @ self.grid.points
        return float(m @ (self.grid.points - mu) ** 2)


def binomial_on_grid(grid, size, prob):
    """Bin(size, prob) placed on the ``size + 1`` grid points in order."""
    if grid.d != size + 1:
        raise ValueError(f"Bin({size}, p) needs {size + 1} grid points, grid has {grid.d}")
    return MixingDensity.from_mass(grid, stats.binom.pmf(np.arange(size + 1), size, prob))


def atoms_on_grid(grid, atoms):
    """Discrete mixing distribution ``{theta: prob}`` on a counting grid."""
    mass = np.zeros(grid.d)
    for theta, p in atoms.items():
        idx = np.flatnonzero(np.isclose(grid.points, theta))
        if idx.size != 1:
            raise ValueError(f"atom {theta} is not a grid point")
        mass[idx[0]] += p
    return MixingDensity.from_mass(grid, mass)


def beta_mixture_on_grid(grid, components):
    """Mixture of Beta densities, ``components = [(weight, a, b), ...]``, on a grid of [0, 1]."""
    vals = np.zeros(grid.d)
    for wt, a, b in components:
        vals += wt * stats.beta.pdf(grid.points, a, b)
    return MixingDensity.from_mass(grid, vals * grid.weights)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


class Kernel:
    """Parametric family ``p(x | theta)``."""

    family = "abstract"
    space = "real"

    def logpdf(self, x, thetas):
        raise NotImplementedError

    def pdf(self, x, thetas):
        return np.exp(self.logpdf(x, thetas))

    def sample(self, thetas, rng, size=None):
        raise NotImplementedError

    def check_x(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ValueError(f"x outside the {self.space} sample space")
        return x

    def to_dict(self):
        return {"family": self.family}


class NormalLocation(Kernel):
    """``N(theta, sigma**2)`` location family on the real line."""

    family = "normal"
    space = "real"

    def __init__(self, sigma):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        # trapezoid check of the density on +-8 sigma
        xs = np.linspace(-8 * self.sigma, 8 * self.sigma, 321)
        total = trapezoid(np.exp(self.logpdf(xs, np.zeros(1)))[:, 0], xs)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"kernel integrates to {total}, not 1")

    def logpdf(self, x, thetas):
        x = self.check_x(x)
        z = (x[:, None] - np.asarray(thetas, dtype=float)[None, :]) / self.sigma
        return -0.5 * z * z - math.log(self.sigma) - 0.5 * math.log(2 * math.pi)

    def sample(self, thetas, rng, size=None):
        thetas = np.asarray(thetas, dtype=float)
        return thetas + self.sigma * rng.standard_normal(size if size is not None else thetas.shape)

    def to_dict(self):
        return {"family": self.family, "sigma": self.sigma}

    def __repr__(self):
        return f"NormalLocation(sigma={self.sigma!r})"


class NormalUnknownVariance(Kernel):
    """``N(theta, psi)`` with the variance ``psi`` a free nuisance parameter.

    ``psi`` must be supplied per evaluation; replicated rows of ``r`` draws
    reduce to the row mean, whose density is ``N(theta, psi / r)``.
    """

    family = "normal-unknown-var"
    space = "real"

    def at(self, psi):
        return NormalLocation(math.sqrt(psi))

    def mean_kernel(self, psi, r):
        return NormalLocation(math.sqrt(psi / r))

    def logpdf(self, x, thetas, psi=None):
        if psi is None:
            raise ValueError("variance psi required")
        return self.at(psi).logpdf(x, thetas)

    def replicate_logpdf(self, rows, thetas, psi):
        """Joint log density of each row of i.i.d. draws, shape ``(n, d)``."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        thetas = np.asarray(thetas, dtype=float)
        r = rows.shape[1]
        sq = ((rows[:, :, None] - thetas[None, None, :]) ** 2).sum(axis=1)
        return -0.5 * sq / psi - 0.5 * r * math.log(2 * math.pi * psi)

    def sample(self, thetas, rng, size=None, psi=None):
        if psi is None:
            raise ValueError("variance psi required")
        return self.at(psi).sample(thetas, rng, size)

    def to_dict(self):
        return {"family": self.family}


class Poisson(Kernel):
    """Poisson counts with mean ``theta``."""

    family = "poisson"
    space = "integer"

    def check_x(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(x < 0) or np.any(x != np.floor(x)):
            raise ValueError("Poisson kernel needs nonnegative integer x")
        return x

    def logpdf(self, x, thetas):
        x = self.check_x(x)[:, None]
        th = np.asarray(thetas, dtype=float)[None, :]
        if np.any(th <= 0):
            raise ValueError("Poisson means must be positive")
        return x * np.log(th) - th - gammaln(x + 1)

    def sample(self, thetas, rng, size=None):
        thetas = np.asarray(thetas, dtype=float)
        return rng.poisson(thetas, size=size if size is not None else thetas.shape).astype(float)


class Tabulated(Kernel):
    """Kernel on a finite sample space ``{0, ..., m-1}`` given by a table.

    ``table[j, k] = p(x = j | theta_k)``; columns must be probability vectors.
    The grid values of ``theta`` are ignored, only their count must match.
    """

    family = "tabulated"
    space = "finite"

    def __init__(self, table):
        t = np.asarray(table, dtype=float)
        if t.ndim != 2:
            raise ValueError("table must be 2-d (x by theta)")
        if np.any(t < 0):
            raise ValueError("table entries must be nonnegative")
        col = t.sum(axis=0)
        if np.any(np.abs(col - 1.0) > 1e-6):
            raise ValueError(f"table columns sum to {col}, not 1")
        t.setflags(write=False)
        self.table = t

    @property
    def n_x(self):
        return self.table.shape[0]

    def check_x(self, x):
        x = np.atleast_1d(np.asarray(x))
        xi = x.astype(int)
        if np.any(xi != x) or np.any(xi < 0) or np.any(xi >= self.n_x):
            raise ValueError(f"x outside the finite sample space {{0..{self.n_x - 1}}}")
        return xi

    def logpdf(self, x, thetas):
        xi = self.check_x(x)
        if np.size(thetas) != self.table.shape[1]:
            raise ValueError("tabulated kernel column count does not match grid")
        with np.errstate(divide="ignore"):
            return np.log(self.table[xi, :])

    def pdf(self, x, thetas):
        xi = self.check_x(x)
        if np.size(thetas) != self.table.shape[1]:
            raise ValueError("tabulated kernel column count does not match grid")
        return self.table[xi, :].copy()

    def sample_index(self, idx, rng):
        idx = np.asarray(idx)
        u = rng.random(idx.shape)
        cdf = np.cumsum(self.table, axis=0)
        k = (u[..., None] > np.moveaxis(cdf[:, idx], 0, -1)).sum(axis=-1)
        return np.minimum(k, self.n_x - 1).astype(float)

    def to_dict(self):
        return {"family": self.family, "table": self.table.tolist()}


def kernel_from_dict(spec):
    fam = spec["family"]
    if fam == "normal":
        return NormalLocation(spec["sigma"])
    if fam == "poisson":
        return Poisson()
    if fam == "tabulated":
        return Tabulated(spec["table"])
    if fam == "normal-unknown-var":
        return NormalUnknownVariance()
    raise ValueError(f"unknown kernel family {fam!r}")


# ---------------------------------------------------------------------------
# quadrature on the sample space
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class XQuadrature:
    """Nodes and weights integrating functions of ``x`` against ``nu``."""

    kind: str
    nodes: np.ndarray
    weights: np.ndarray
    tolerance: float = 1e-8

    def integrate(self, values, axis=0):
        return np.tensordot(self.weights, values, axes=([0], [axis]))


def quadrature_for(kernel: Kernel, grid: ThetaGrid, spacing=None, width=8.0) -> XQuadrature:
    """Default rule covering the effective support of every ``Pi_f`` on ``grid``.

    Normal kernels: trapezoid on ``[theta_1 - 8 sigma, theta_d + 8 sigma]`` with
    spacing ``sigma / 20``.  Poisson: all counts up to a tail mass below
    ``1e-12``.  Tabulated: the whole finite space with unit weights.
    """
    if isinstance(kernel, Tabulated):
        return XQuadrature("finite", np.arange(kernel.n_x, dtype=float), np.ones(kernel.n_x), 0.0)
    if isinstance(kernel, Poisson):
        top = int(stats.poisson.isf(1e-12, grid.points.max())) + 1
        nodes = np.arange(top + 1, dtype=float)
        return XQuadrature("finite", nodes, np.ones_like(nodes), 1e-12)
    if isinstance(kernel, NormalLocation):
        s = kernel.sigma
        h = spacing if spacing is not None else s / 20
        a = grid.points[0] - width * s
        b = grid.points[-1] + width * s
        m = int(round((b - a) / h)) + 1
        nodes = np.linspace(a, b, m)
        step = (b - a) / (m - 1)
        w = np.full(m, step)
        w[0] = w[-1] = step / 2
        return XQuadrature("trapezoid", nodes, w, 1e-8)
    raise ValueError(f"no default quadrature for {kernel!r}")


# ---------------------------------------------------------------------------
# marginal, posterior, divergences
# ---------------------------------------------------------------------------


def _log_mass(phi):
    with np.errstate(divide="ignore"):
        return np.log(phi.mass)


def log_marginal(phi: MixingDensity, kernel: Kernel, x):
    """``log Pi_phi(x)`` for each entry of ``x``."""
    lp = kernel.logpdf(x, phi.grid.points)
    return logsumexp(lp + _log_mass(phi)[None, :], axis=1)


def marginal(phi: MixingDensity, kernel: Kernel, x):
    """``Pi_phi(x) = sum_k p(x|theta_k) phi_k mu_k``; scalar in, scalar out."""
    out = np.exp(log_marginal(phi, kernel, x))
    return float(out[0]) if np.ndim(x) == 0 else out


def posterior_mass_matrix(log_p, log_mass, x=None):
    """Row-wise posterior masses from a log-likelihood matrix ``(n, d)``."""
    a = log_p + log_mass[None, :]
    top = a.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        bad = int(np.flatnonzero(~np.isfinite(top[:, 0]))[0])
        raise ZeroMarginalError(x[bad] if x is not None else bad)
    # shift by the row maximum, not logsumexp, so large |log p| costs no accuracy
    e = np.exp(a - top)
    return e / e.sum(axis=1, keepdims=True)


def posterior(phi: MixingDensity, kernel: Kernel, x) -> MixingDensity:
    """Posterior of ``theta`` given one observation ``x`` under prior ``phi``."""
    xs = np.atleast_1d(x)
    if xs.shape[0] != 1:
        raise ValueError("posterior takes a single observation")
    pm = posterior_mass_matrix(kernel.logpdf(xs, phi.grid.points), _log_mass(phi), xs)[0]
    return MixingDensity(phi.grid, pm / phi.grid.weights)


def kl_theta(psi: MixingDensity, phi: MixingDensity) -> float:
    """``K(psi, phi) = sum psi_k mu_k log(psi_k / phi_k)`` with ``0 log 0 = 0``."""
    if not psi.grid.same_as(phi.grid):
        raise ValueError("densities live on different grids")
    a, b = psi.values, phi.values
    pos = a > 0
    if np.any(b[pos] == 0):
        return math.inf
    # difference of logs: a / b overflows when b is subnormal
    return float(np.sum(psi.grid.weights[pos] * a[pos] * (np.log(a[pos]) - np.log(b[pos]))))


def kl_marginal(
    f: MixingDensity,
    phi: MixingDensity,
    kernel: Kernel,
    quad: XQuadrature,
    kernel_phi: Optional[Kernel] = None,
) -> float:
    """``K(Pi_f, Pi_phi)`` on the quadrature nodes.

    ``kernel_phi`` allows the estimate to carry its own sampling density
    (for instance an estimated variance); by default both share ``kernel``.
    """
    kernel_phi = kernel if kernel_phi is None else kernel_phi
    lf = log_marginal(f, kernel, quad.nodes)
    lp = log_marginal(phi, kernel_phi, quad.nodes)
    pf = np.exp(lf)
    keep = pf > 0
    if np.any(~np.isfinite(lp[keep])):
        return math.inf
    return float(np.sum(quad.weights[keep] * pf[keep] * (lf[keep] - lp[keep])))


# ---------------------------------------------------------------------------
# simulation and dataset files
# ---------------------------------------------------------------------------


def sample_mixture(f: MixingDensity, kernel: Kernel, rng, n, r=1, psi=None):
    """Draw ``n`` rows of ``r`` i.i.d. observations from the hierarchical model.

    Returns ``(x, theta)`` with ``x`` of shape ``(n, r)`` and the latent
    ``theta`` of shape ``(n,)``.
    """
    if n < 1 or r < 1:
        raise ValueError("need n >= 1 and r >= 1")
    idx = rng.choice(f.d, size=n, p=f.mass / f.mass.sum())
    theta = f.grid.points[idx]
    if isinstance(kernel, Tabulated):
        x = kernel.sample_index(np.repeat(idx[:, None], r, axis=1), rng)
    elif isinstance(kernel, NormalUnknownVariance):
        x = kernel.sample(np.repeat(theta[:, None], r, axis=1), rng, psi=psi)
    else:
        x = kernel.sample(np.repeat(theta[:, None], r, axis=1), rng)
    return x, theta


def write_dataset(path, x, theta=None, rep_id=0, append=False):
    """Write rows as ``rep_id,row_id,x_1..x_r[,theta_latent]``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = x.shape[1]
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        if not append:
            header = ["rep_id", "row_id"] + [f"x_{j + 1}" for j in range(r)]
            if theta is not None:
                header.append("theta_latent")
            wr.writerow(header)
        for i, row in enumerate(x):
            rec = [rep_id, i] + [repr(float(v)) for v in row]
            if theta is not None:
                rec.append(repr(float(theta[i])))
            wr.writerow(rec)


def read_dataset(path, rep_id=None):
    """Read a dataset file; the latent column, if present, is dropped."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
        if header[:2] != ["rep_id", "row_id"] or not xcols:
            raise ValueError(f"{path}: not a dataset file (header {header})")
        rows = []
        for rec in rd:
            if rep_id is not None and int(rec[0]) != rep_id:
                continue
            rows.append([float(rec[i]) for i in xcols])
    return np.asarray(rows, dtype=float).reshape(-1, len(xcols))
