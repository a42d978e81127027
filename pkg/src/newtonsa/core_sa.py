"""Projected Robbins-Monro iterations and step-size schedules.

Every recursive estimator in the package is a special case of

    x_n = Proj_X(x_{n-1} + w_n * y_n),

where ``y_n`` is a noisy observation of a mean drift ``h(x_{n-1})``.
This module supplies the pieces shared by all of them: deterministic
weight schedules, constraint sets with Euclidean projections, a single
step that also reports the projection correction, and a small driver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class ScheduleError(ValueError):
    """Raised when a weight schedule violates the step-size conditions."""


class StepError(ArithmeticError):
    """Raised when an SA step receives a non-finite observation."""

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# weight schedules
# ---------------------------------------------------------------------------

SCHEDULE_KINDS = ("harmonic", "power", "plateau", "table")


@dataclass(frozen=True)
class WeightSchedule:
    """Deterministic step sizes ``w_1, w_2, ...``.

    Kinds
    -----
    harmonic
        ``w_n = 1 / (n + 1)``.
    power
        ``w_n = a * n**(-gamma)`` with ``0 < a <= 1`` and ``gamma in (0.5, 1]``.
    plateau
        ``w_n = min(w0, n0 / n)``: constant during burn-in, then harmonic decay.
    table
        Explicit finite table; asking past its end is an error.

    The built-in kinds satisfy ``sum w_n = inf`` and ``sum w_n**2 < inf``.
    Emitted weights lie in ``(0, 1]``; ``w_1 = 1`` is allowed so the running
    mean (``w_n = 1/n``) is expressible.
    """

    kind: str = "harmonic"
    a: float = 1.0
    gamma: float = 1.0
    w0: float = 0.1
    n0: float = 100.0
    table: tuple = ()

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "power":
            if not 0.5 < self.gamma <= 1.0:
                raise ScheduleError(
                    f"power schedule needs gamma in (0.5, 1], got {self.gamma}: "
                    + ("sum of w_n**2 diverges" if self.gamma <= 0.5 else "sum of w_n converges")
                )
            if not 0.0 < self.a <= 1.0:
                raise ScheduleError(f"power schedule needs 0 < a <= 1, got a={self.a}")
        elif self.kind == "plateau":
            if not 0.0 < self.w0 <= 1.0:
                raise ScheduleError(f"plateau schedule needs 0 < w0 <= 1, got {self.w0}")
            if self.n0 <= 0:
                raise ScheduleError(f"plateau schedule needs n0 > 0, got {self.n0}")
        elif self.kind == "table":
            t = np.asarray(self.table, dtype=float)
            if t.ndim != 1 or t.size == 0:
                raise ScheduleError("table schedule needs a non-empty 1-d table")
            if np.any(t <= 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
                raise ScheduleError("table weights must lie in (0, 1]")

    def __call__(self, n):
        """Weight at (1-based) iteration ``n``; accepts scalars or arrays."""
        n_arr = np.asarray(n)
        if np.any(n_arr < 1):
            raise ScheduleError("iterations are numbered from 1")
        if self.kind == "harmonic":
            out = 1.0 / (n_arr + 1.0)
        elif self.kind == "power":
            out = self.a * np.power(n_arr, -self.gamma, dtype=float)
        elif self.kind == "plateau":
            out = np.minimum(self.w0, self.n0 / n_arr)
        else:
            t = np.asarray(self.table, dtype=float)
            if np.any(n_arr > t.size):
                raise ScheduleError(f"table schedule has only {t.size} entries")
            out = t[n_arr - 1]
        if np.ndim(out) == 0:
            return float(out)
        return out

    def weights(self, n_iters):
        """Array ``(w_1, ..., w_{n_iters})``."""
        return np.asarray(self(np.arange(1, n_iters + 1)), dtype=float)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "power":
            d.update(a=self.a, gamma=self.gamma)
        elif self.kind == "plateau":
            d.update(w0=self.w0, n0=self.n0)
        elif self.kind == "table":
            d.update(table=list(self.table))
        return d


def make_weight_schedule(kind="harmonic", **params):
    """Build a :class:`WeightSchedule`, rejecting invalid parameters."""
    if "table" in params:
        params["table"] = tuple(float(v) for v in params["table"])
    return WeightSchedule(kind=kind, **params)


# ---------------------------------------------------------------------------
# constraint sets
# ---------------------------------------------------------------------------


def project_simplex(v):
    """Euclidean projection of ``v`` onto the probability simplex.

    Sort-based algorithm (Held et al.; Duchi et al. 2008), O(d log d).
    """
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


@dataclass(frozen=True)
class ConstraintSet:
    """Closed convex set with a Euclidean projection.

    ``kind`` is ``"unconstrained"``, ``"box"`` (componentwise ``[lower, upper]``)
    or ``"simplex"`` (``{phi : phi_k >= floor, sum phi = 1}``).
    """

    kind: str = "unconstrained"
    lower: float = -math.inf
    upper: float = math.inf
    floor: float = 0.0
    dim: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("unconstrained", "box", "simplex"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "box" and not self.lower <= self.upper:
            raise ValueError("box needs lower <= upper")
        if self.kind == "simplex":
            if self.floor < 0:
                raise ValueError("simplex floor must be nonnegative")
            if self.dim is not None and self.dim * self.floor >= 1.0:
                raise ValueError(f"floor {self.floor} infeasible in dimension {self.dim}: d*eps must be < 1")

    def contains(self, x, atol=0.0):
        x = np.asarray(x, dtype=float)
        if self.kind == "unconstrained":
            return bool(np.all(np.isfinite(x)))
        if self.kind == "box":
            return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))
        return bool(np.all(x >= self.floor - atol) and abs(x.sum() - 1.0) <= max(atol, 1e-12))


def unconstrained():
    return ConstraintSet("unconstrained")


def box(lower, upper):
    return ConstraintSet("box", lower=float(lower), upper=float(upper))


def floored_simplex(floor=0.0, dim=None):
    return ConstraintSet("simplex", floor=float(floor), dim=dim)


def project(c: ConstraintSet, x):
    """Nearest point of ``c`` to ``x`` in Euclidean norm."""
    x = np.asarray(x, dtype=float)
    if c.dim is not None and x.size != c.dim:
        raise ValueError(f"dimension mismatch: constraint has dim {c.dim}, point has {x.size}")
    if c.kind == "unconstrained":
        return x.copy()
    if c.kind == "box":
        return np.clip(x, c.lower, c.upper)
    d = x.size
    eps = c.floor
    if d * eps >= 1.0:
        raise ValueError(f"floor {eps} infeasible in dimension {d}: d*eps must be < 1")
    if eps == 0.0:
        return project_simplex(x)
    # phi = eps + (1 - d eps) psi with psi on the unit simplex
    scale = 1.0 - d * eps
    psi = project_simplex((x - eps) / scale)
    out = eps + scale * psi
    # exact floor; renormalisation drift is below one ulp of the sum
    return np.maximum(out, eps)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


@dataclass
class SAState:
    """Current SA iterate: iteration counter ``n`` and point ``x``."""

    n: int
    x: np.ndarray
    z: Optional[np.ndarray] = None
    history: Optional[list] = None

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))


def sa_step(state: SAState, y, w, c: ConstraintSet = None) -> SAState:
    """One projected Robbins-Monro step.

    Returns a new state with ``x = Proj_c(x + w y)`` and ``z`` set to the
    correction ``(projected - unprojected) / w``, so that
    ``x_n = x_{n-1} + w y + w z`` holds.
    """
    c = c if c is not None else unconstrained()
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not np.all(np.isfinite(y)):
        raise StepError(f"non-finite observation y={y}", iteration=state.n + 1)
    if not 0.0 < w <= 1.0:
        raise StepError(f"step size {w} outside (0, 1]", iteration=state.n + 1)
    raw = state.x + w * y
    new = project(c, raw)
    z = (new - raw) / w
    hist = state.history
    if hist is not None:
        hist.append(new.copy())
    return SAState(n=state.n + 1, x=new, z=z, history=hist)


@dataclass
class Trace:
    """Record of an SA run."""

    n: np.ndarray
    x: np.ndarray
    z: np.ndarray
    y_sq_max: float
    meta: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.x[-1]


def run_sa(
    x0,
    schedule: WeightSchedule,
    observe: Callable,
    n_iters: int,
    c: ConstraintSet = None,
    rng: Optional[np.random.Generator] = None,
) -> Trace:
    """Run ``n_iters`` projected SA steps.

    ``observe(x_prev, n, rng)`` returns the noisy drift observation ``y_n``.
    The trace holds ``x_0, ..., x_{n_iters}`` and the correction terms
    ``z_1, ..., z_{n_iters}``; ``y_sq_max`` is the running maximum of
    ``|y_n|**2`` (an empirical check of bounded second moments).
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    c = c if c is not None else unconstrained()
    state = SAState(0, x0)
    xs = np.empty((n_iters + 1, state.x.size))
    zs = np.empty((n_iters, state.x.size))
    xs[0] = state.x
    y_sq_max = 0.0
    w = schedule.weights(n_iters)
    for i in range(n_iters):
        y = np.atleast_1d(np.asarray(observe(state.x, i + 1, rng), dtype=float))
        try:
            state = sa_step(state, y, w[i], c)
        except StepError as exc:
            raise StepError(str(exc).split(": ", 1)[-1], iteration=i + 1) from None
        y_sq_max = max(y_sq_max, float(y @ y))
        xs[i + 1] = state.x
        zs[i] = state.z
    return Trace(
        n=np.arange(n_iters + 1),
        x=xs,
        z=zs,
        y_sq_max=y_sq_max,
        meta={"schedule": schedule.to_dict(), "constraint": c.kind},
    )
