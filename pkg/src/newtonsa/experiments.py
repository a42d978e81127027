"""Config-driven experiments with seeded replications.

A config is a JSON document::

    {
      "kind": "compare",
      "seed": 0, "reps": 50, "n": 100, "out": "out/compare-I",
      "model": {"grid": {"type": "integers", "lo": -4, "hi": 4},
                "kernel": {"family": "normal", "sigma": 1.0},
                "truth": {"type": "binomial", "size": 8, "prob": 0.6}},
      "schedule": {"kind": "harmonic"},
      "options": {"n_particles": 1000}
    }

Replication ``i`` draws from ``default_rng(SeedSequence(seed, spawn_key=(i,)))``,
so adding replications never changes earlier ones.  Every CSV is written
with ``repr`` floats and fixed row order; ``wall_ms`` is left blank unless
``timing`` is on, which keeps outputs byte-identical across reruns.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import baselines, gallery, newton, npp, samc
from .core_sa import ScheduleError, WeightSchedule, make_weight_schedule
from .mixture import (
    MixingDensity,
    NormalUnknownVariance,
    ThetaGrid,
    atoms_on_grid,
    beta_mixture_on_grid,
    binomial_on_grid,
    kernel_from_dict,
    kl_marginal,
    kl_theta,
    quadrature_for,
    sample_mixture,
    write_dataset,
)

KINDS = (
    "newton-finite",
    "newton-compact",
    "npp",
    "compare",
    "samc-ising",
    "conjecture",
    "gallery:running-mean",
    "gallery:t-quantile",
    "gallery:eb",
    "gallery:am",
    "gallery:saem",
)
SUMMARY_HEADER = ["rep_id", "estimator", "kl_theta", "kl_marginal", "wall_ms"]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


def rep_rng(seed, rep_id):
    """Independent stream for replication ``rep_id``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(rep_id),)))


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([v if isinstance(v, str) else _fmt(v) for v in r])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_TOP_KEYS = {"kind", "seed", "reps", "n", "out", "model", "schedule", "options", "timing", "workers", "plot"}
_MODEL_KEYS = {"grid", "kernel", "truth", "r", "psi"}
_OPTION_KEYS = {
    "newton-finite": {"stride", "write_data"},
    "newton-compact": {"stride", "write_data"},
    "compare": {"estimators", "n_particles", "alpha"},
    "npp": {"estimators", "floor", "xi_box"},
    "samc-ising": {"d", "temps"},
    "conjecture": {"true_grid", "checkpoints"},
    "gallery:running-mean": {"mean", "stride"},
    "gallery:t-quantile": {"alpha", "nu", "x0", "stride"},
    "gallery:eb": {"xi", "x0", "stride"},
    "gallery:am": {"mean", "cov", "stride"},
    "gallery:saem": {"lam", "sigma", "mu_true", "n_data", "mu0", "m", "stride"},
}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int = 0
    reps: int = 1
    n: int = 100
    out: str = "out"
    model: dict = field(default_factory=dict)
    schedule: Optional[dict] = None
    options: dict = field(default_factory=dict)
    timing: bool = False
    workers: int = 1
    plot: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind: unknown experiment kind {self.kind!r}; choose from {', '.join(KINDS)}")
        for name in ("seed", "reps", "n", "workers"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name}: expected an integer, got {v!r}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        if self.reps < 1:
            raise ConfigError("reps: must be >= 1")
        if self.n < 1:
            raise ConfigError("n: must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if not isinstance(self.model, dict) or not isinstance(self.options, dict):
            raise ConfigError("model/options: expected objects")
        extra = set(self.model) - _MODEL_KEYS
        if extra:
            raise ConfigError(f"model.{sorted(extra)[0]}: unknown key")
        extra = set(self.options) - _OPTION_KEYS[self.kind]
        if extra:
            raise ConfigError(f"options.{sorted(extra)[0]}: unknown key for {self.kind}")
        if self.schedule is not None:
            self.build_schedule()

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        extra = set(d) - _TOP_KEYS
        if extra:
            raise ConfigError(f"{sorted(extra)[0]}: unknown key")
        if "kind" not in d:
            raise ConfigError("kind: missing")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        return cls.from_dict(d)

    def to_dict(self):
        return {
            "kind": self.kind,
            "seed": self.seed,
            "reps": self.reps,
            "n": self.n,
            "out": self.out,
            "model": self.model,
            "schedule": self.schedule,
            "options": self.options,
            "timing": self.timing,
            "workers": self.workers,
            "plot": self.plot,
        }

    def replace(self, **kw):
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.from_dict(d)

    def build_schedule(self, default=None):
        if self.schedule is None:
            return default if default is not None else WeightSchedule("harmonic")
        spec = dict(self.schedule)
        try:
            return make_weight_schedule(**spec)
        except (ScheduleError, TypeError) as exc:
            raise ConfigError(f"schedule: {exc}") from None

    def opt(self, name, default):
        return self.options.get(name, default)


def build_grid(spec) -> ThetaGrid:
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError("model.grid: expected an object with a 'type'")
    t = spec["type"]
    try:
        if t == "integers":
            _only(spec, {"type", "lo", "hi"}, "model.grid")
            return ThetaGrid.counting(np.arange(int(spec["lo"]), int(spec["hi"]) + 1, dtype=float))
        if t == "points":
            _only(spec, {"type", "points"}, "model.grid")
            return ThetaGrid.counting(spec["points"])
        if t == "interval":
            _only(spec, {"type", "a", "b", "m"}, "model.grid")
            return ThetaGrid.trapezoid(float(spec["a"]), float(spec["b"]), int(spec.get("m", 201)))
    except KeyError as exc:
        raise ConfigError(f"model.grid.{exc.args[0]}: missing") from None
    except ValueError as exc:
        raise ConfigError(f"model.grid: {exc}") from None
    raise ConfigError(f"model.grid.type: unknown grid type {t!r}")


def build_truth(spec, grid) -> MixingDensity:
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError("model.truth: expected an object with a 'type'")
    t = spec["type"]
    try:
        if t == "binomial":
            _only(spec, {"type", "size", "prob"}, "model.truth")
            return binomial_on_grid(grid, int(spec["size"]), float(spec["prob"]))
        if t == "atoms":
            _only(spec, {"type", "atoms"}, "model.truth")
            return atoms_on_grid(grid, {float(a): float(p) for a, p in spec["atoms"]})
        if t == "beta":
            _only(spec, {"type", "components"}, "model.truth")
            return beta_mixture_on_grid(grid, [tuple(map(float, c)) for c in spec["components"]])
        if t == "uniform":
            _only(spec, {"type"}, "model.truth")
            return MixingDensity.uniform(grid)
    except KeyError as exc:
        raise ConfigError(f"model.truth.{exc.args[0]}: missing") from None
    except ValueError as exc:
        raise ConfigError(f"model.truth: {exc}") from None
    raise ConfigError(f"model.truth.type: unknown truth type {t!r}")


def build_kernel(spec):
    if not isinstance(spec, dict) or "family" not in spec:
        raise ConfigError("model.kernel: expected an object with a 'family'")
    try:
        return kernel_from_dict(spec)
    except KeyError as exc:
        raise ConfigError(f"model.kernel.{exc.args[0]}: missing") from None
    except ValueError as exc:
        raise ConfigError(f"model.kernel: {exc}") from None


def _only(spec, allowed, where):
    extra = set(spec) - allowed
    if extra:
        raise ConfigError(f"{where}.{sorted(extra)[0]}: unknown key")


def _model(cfg):
    m = cfg.model
    for key in ("grid", "truth", "kernel"):
        if key not in m:
            raise ConfigError(f"model.{key}: missing")
    grid = build_grid(m["grid"])
    return grid, build_truth(m["truth"], grid), build_kernel(m["kernel"])


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_INT_GRID = {"type": "integers", "lo": -4, "hi": 4}
_N1 = {"family": "normal", "sigma": 1.0}

PRESETS = {
    "finite-binomial": {
        "kind": "compare",
        "seed": 0,
        "reps": 50,
        "n": 100,
        "model": {"grid": _INT_GRID, "kernel": _N1, "truth": {"type": "binomial", "size": 8, "prob": 0.6}},
        "schedule": {"kind": "harmonic"},
        "options": {"n_particles": 1000, "alpha": 1.0},
    },
    "finite-two-atoms": {
        "kind": "compare",
        "seed": 0,
        "reps": 50,
        "n": 100,
        "model": {"grid": _INT_GRID, "kernel": _N1, "truth": {"type": "atoms", "atoms": [[-2, 0.5], [2, 0.5]]}},
        "schedule": {"kind": "harmonic"},
        "options": {"n_particles": 1000, "alpha": 1.0},
    },
    "compact-beta": {
        "kind": "newton-compact",
        "seed": 0,
        "reps": 1,
        "n": 100,
        "model": {
            "grid": {"type": "interval", "a": 0.0, "b": 1.0, "m": 201},
            "kernel": {"family": "normal", "sigma": 0.1},
            "truth": {"type": "beta", "components": [[1.0, 2.0, 7.0]]},
        },
        "schedule": {"kind": "harmonic"},
    },
    "compact-beta-mix": {
        "kind": "newton-compact",
        "seed": 0,
        "reps": 1,
        "n": 100,
        "model": {
            "grid": {"type": "interval", "a": 0.0, "b": 1.0, "m": 201},
            "kernel": {"family": "normal", "sigma": 0.1},
            "truth": {"type": "beta", "components": [[0.33, 3.0, 30.0], [0.67, 4.0, 4.0]]},
        },
        "schedule": {"kind": "harmonic"},
    },
    "npp-binomial": {
        "kind": "npp",
        "seed": 0,
        "reps": 100,
        "n": 100,
        "model": {
            "grid": _INT_GRID,
            "kernel": {"family": "normal-unknown-var"},
            "truth": {"type": "binomial", "size": 8, "prob": 0.5},
            "r": 10,
            "psi": 1.5,
        },
        "schedule": {"kind": "harmonic"},
        "options": {"estimators": ["npp", "npp-bayes", "newton-known"]},
    },
    "ising-d10": {"kind": "samc-ising", "seed": 0, "reps": 1, "n": 100_000, "options": {"d": 10}},
    "conjecture": {
        "kind": "conjecture",
        "seed": 0,
        "reps": 10,
        "n": 10_000,
        "model": {"grid": {"type": "points", "points": [-0.5, 0.5]}, "kernel": _N1, "truth": {"type": "uniform"}},
        "schedule": {"kind": "harmonic"},
        "options": {"true_grid": {"type": "points", "points": [0.0]}, "checkpoints": [100, 1000, 10000]},
    },
    "gallery:running-mean": {"kind": "gallery:running-mean", "seed": 0, "reps": 1, "n": 1000},
    "gallery:t-quantile": {
        "kind": "gallery:t-quantile",
        "seed": 0,
        "reps": 20,
        "n": 10_000,
        "options": {"alpha": 0.75, "nu": 5, "x0": [0.5, 0.75, 1.0]},
    },
    "gallery:eb": {"kind": "gallery:eb", "seed": 0, "reps": 20, "n": 10_000, "options": {"xi": 1.0, "x0": 1.5}},
    "gallery:am": {"kind": "gallery:am", "seed": 0, "reps": 20, "n": 100_000, "options": {"mean": [3.0], "cov": [[4.0]]}},
    "gallery:saem": {
        "kind": "gallery:saem",
        "seed": 0,
        "reps": 20,
        "n": 2000,
        "options": {"lam": 0.5, "sigma": 1.0, "mu_true": [-3.0, 3.0], "n_data": 200, "mu0": [-1.0, 1.0], "m": 1},
    },
}

DEFAULT_PRESET = {
    "newton": "compact-beta",
    "npp": "npp-binomial",
    "compare": "finite-binomial",
    "samc-ising": "ising-d10",
    "conjecture": "conjecture",
}


def preset(name, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    d = copy.deepcopy(PRESETS[name])
    d.setdefault("out", os.path.join("out", name.replace(":", "-")))
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# replication bodies; each returns (summary rows, extra rows, files)
# ---------------------------------------------------------------------------


class _Clock:
    def __init__(self, on):
        self.on = on

    def __call__(self, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        return out, ((time.perf_counter() - t0) * 1e3 if self.on else None)


def _newton_rep(cfg, rep_id, tdir):
    grid, f, kernel = _model(cfg)
    rng = rep_rng(cfg.seed, rep_id)
    x, theta = sample_mixture(f, kernel, rng, cfg.n)
    clock = _Clock(cfg.timing)
    quad = quadrature_for(kernel, grid)
    run, ms = clock(
        newton.run_newton,
        x[:, 0],
        kernel,
        MixingDensity.uniform(grid),
        cfg.build_schedule(),
        f_true=f,
        quad=quad,
        stride=int(cfg.opt("stride", 1)),
    )
    newton.write_trace(os.path.join(tdir, f"rep{rep_id:04d}_newton.csv"), run)
    write_csv(
        os.path.join(tdir, f"rep{rep_id:04d}_estimate.csv"),
        ["theta", "value"],
        [(t, v) for t, v in zip(grid.points, run.final.values)],
    )
    if cfg.opt("write_data", False):
        write_dataset(os.path.join(tdir, f"rep{rep_id:04d}_data.csv"), x, theta, rep_id)
    return [(rep_id, "newton", run.kl_theta[-1], run.kl_marginal[-1], ms)], []


def _compare_rep(cfg, rep_id, tdir):
    grid, f, kernel = _model(cfg)
    rng = rep_rng(cfg.seed, rep_id)
    x = sample_mixture(f, kernel, rng, cfg.n)[0][:, 0]
    quad = quadrature_for(kernel, grid)
    f0 = MixingDensity.uniform(grid)
    clock = _Clock(cfg.timing)
    wanted = cfg.opt("estimators", ["nr", "npml", "npb"])
    rows = []
    for est in wanted:
        if est == "nr":
            run, ms = clock(newton.run_newton, x, kernel, f0, cfg.build_schedule())
            fhat = run.final
        elif est == "npml":
            res, ms = clock(baselines.npml_em, x, grid, kernel)
            fhat = res.estimate
            write_csv(
                os.path.join(tdir, f"rep{rep_id:04d}_npml_loglik.csv"),
                ["iteration", "loglik"],
                list(enumerate(res.loglik)),
            )
        elif est == "npb":
            prior = baselines.DPPrior(float(cfg.opt("alpha", 1.0)), f0)
            res, ms = clock(
                baselines.npb_sequential_imputation, x, prior, kernel, int(cfg.opt("n_particles", 1000)), rng
            )
            fhat = res.estimate
        else:
            raise ConfigError(f"options.estimators: unknown estimator {est!r}")
        rows.append((rep_id, est, kl_theta(f, fhat), kl_marginal(f, fhat, kernel, quad), ms))
        write_csv(
            os.path.join(tdir, f"rep{rep_id:04d}_{est}.csv"),
            ["theta", "value"],
            [(t, v) for t, v in zip(grid.points, fhat.values)],
        )
    return rows, []


def _npp_rep(cfg, rep_id, tdir):
    grid, f, kernel = _model(cfg)
    if not isinstance(kernel, NormalUnknownVariance):
        raise ConfigError("model.kernel.family: npp needs 'normal-unknown-var'")
    r = int(cfg.model.get("r", 10))
    psi = float(cfg.model.get("psi", 1.0))
    if r < 2 or psi <= 0:
        raise ConfigError("model.r/model.psi: need r >= 2 and psi > 0")
    rng = rep_rng(cfg.seed, rep_id)
    rows_x = sample_mixture(f, kernel, rng, cfg.n, r=r, psi=psi)[0]
    true_k = kernel.mean_kernel(psi, r)
    quad = quadrature_for(true_k, grid)
    sched = cfg.build_schedule()
    clock = _Clock(cfg.timing)
    out = []
    for est in cfg.opt("estimators", ["npp", "npp-bayes", "newton-known"]):
        if est in ("npp", "npp-bayes"):
            run, ms = clock(
                npp.run_npp,
                rows_x,
                grid,
                schedule=sched,
                floor=float(cfg.opt("floor", npp.DEFAULT_FLOOR)),
                xi_box=tuple(cfg.opt("xi_box", npp.DEFAULT_XI_BOX)),
                estimator="ube" if est == "npp" else "bayes",
            )
            npp.write_trace(os.path.join(tdir, f"rep{rep_id:04d}_{est}.csv"), run)
            fhat, k_hat, xi = run.final, kernel.mean_kernel(run.xi, r), run.xi
            extra = (int(run.proj_simplex[-1]), int(run.proj_box[-1]))
        elif est == "newton-known":
            run, ms = clock(newton.run_newton, rows_x.mean(axis=1), true_k, MixingDensity.uniform(grid), sched)
            fhat, k_hat, xi, extra = run.final, true_k, psi, (0, 0)
        else:
            raise ConfigError(f"options.estimators: unknown estimator {est!r}")
        kt = kl_theta(f, fhat)
        km = kl_marginal(f, fhat, true_k, quad, kernel_phi=k_hat)
        out.append(((rep_id, est, kt, km, ms), (rep_id, est, xi, *extra)))
    return [o[0] for o in out], [o[1] for o in out]


def _samc_rep(cfg, rep_id, tdir):
    d = int(cfg.opt("d", 10))
    temps = cfg.opt("temps", [1.0 + 0.5 * i for i in range(7)])
    rng = rep_rng(cfg.seed, rep_id)
    try:
        model = samc.IsingModel(d)
    except ValueError as exc:
        raise ConfigError(f"options.d: {exc}") from None
    res = samc.run_samc(model, cfg.n, rng, schedule=cfg.build_schedule(samc.default_schedule()))
    samc.write_dos_csv(os.path.join(tdir, f"rep{rep_id:04d}_dos.csv"), res)
    samc.write_partition_csv(os.path.join(tdir, f"rep{rep_id:04d}_partition.csv"), res, temps)
    err = max(abs(float(res.log_partition(T)) - samc.log_partition_exact(d, T)) for T in temps)
    return [], [(rep_id, err, math.fsum(res.omega_hat), res.flagged)]


def _gallery_rep(cfg, rep_id, tdir):
    name = cfg.kind.split(":", 1)[1]
    rng = rep_rng(cfg.seed, rep_id)
    stride = int(cfg.opt("stride", max(1, cfg.n // 1000)))
    path = os.path.join(tdir, f"rep{rep_id:04d}_{name}.csv")
    sched = cfg.build_schedule(None) if cfg.schedule is not None else None
    if name == "running-mean":
        z = rng.normal(float(cfg.opt("mean", 0.0)), 1.0, size=cfg.n)
        tr = gallery.running_mean_sa(z)
        write_csv(path, ["n", "x"], [(i, tr.x[i, 0]) for i in range(0, cfg.n + 1, stride)])
        return [], [(rep_id, tr.final[0], float(np.mean(z)))]
    if name == "t-quantile":
        alpha, nu = float(cfg.opt("alpha", 0.75)), float(cfg.opt("nu", 5))
        x0s = [float(v) for v in cfg.opt("x0", [0.5, 0.75, 1.0])]
        root = gallery.t_quantile_root(alpha, nu)
        traces = [gallery.t_quantile_sa(alpha, nu, x0, sched, cfg.n, rng) for x0 in x0s]
        idx = list(range(0, cfg.n + 1, stride))
        write_csv(path, ["n"] + [f"x0={x0!r}" for x0 in x0s], [[i] + [t.x[i, 0] for t in traces] for i in idx])
        rows = []
        for x0, t in zip(x0s, traces):
            tail = float(t.x[-100:, 0].mean())
            rows.append((rep_id, x0, tail, abs(tail - root)))
        return [], rows
    if name == "eb":
        xi, x0 = float(cfg.opt("xi", 1.0)), float(cfg.opt("x0", 1.5))
        tr = gallery.eb_poisson_exp_sa(xi, x0, sched, cfg.n, rng)
        write_csv(path, ["n", "x"], [(i, tr.x[i, 0]) for i in range(0, cfg.n + 1, stride)])
        return [], [(rep_id, tr.final[0], abs(tr.final[0] - xi), tr.meta["projections"])]
    if name == "am":
        mean = np.atleast_1d(np.asarray(cfg.opt("mean", [3.0]), dtype=float))
        cov = np.atleast_2d(np.asarray(cfg.opt("cov", [[4.0]]), dtype=float))
        run = gallery.run_am(gallery.gaussian_log_target(mean, cov), mean * 0, cfg.n, rng, schedule=sched)
        p = mean.size
        write_csv(path, ["n"] + [f"mu_{j + 1}" for j in range(p)], [[i, *run.mus[i]] for i in range(0, cfg.n + 1, stride)])
        return [], [(rep_id, *run.mu, *run.sigma.ravel(), run.acceptance)]
    if name == "saem":
        model = gallery.SAEMToyModel(float(cfg.opt("lam", 0.5)), float(cfg.opt("sigma", 1.0)))
        x, _ = model.sample(int(cfg.opt("n_data", 200)), tuple(cfg.opt("mu_true", [-3.0, 3.0])), rng)
        mu0 = tuple(cfg.opt("mu0", [-1.0, 1.0]))
        run = gallery.run_saem(
            model, x, sched or WeightSchedule("harmonic"), cfg.n, rng, mu0=mu0, m_rule=int(cfg.opt("m", 1))
        )
        _, ll_em = baselines.two_component_em(x, mu0, model.lam, model.sigma)
        write_csv(path, ["n", "mu_1", "mu_2", "loglik"], [(i, *run.mus[i], run.loglik[i]) for i in range(0, cfg.n + 1, stride)])
        return [], [(rep_id, run.loglik[-1], ll_em[-1], abs(run.loglik[-1] - ll_em[-1]))]
    raise ConfigError(f"kind: unknown gallery driver {name!r}")


def infimum_kl_marginal(f_true, grid, kernel, quad, tol=1e-10, max_iters=200_000):
    """``inf_phi K(Pi_f, Pi_phi)`` over densities on ``grid`` by fixed-point iteration.

    The update ``phi_k <- phi_k int Pi_f p(.|theta_k) / Pi_phi`` is EM for
    the population likelihood and does not increase the divergence.
    Returns ``(phi, K, iterations)``.
    """
    phi = MixingDensity.uniform(grid)
    for it in range(1, max_iters + 1):
        new = MixingDensity.from_mass(grid, newton.T_values(phi, f_true, kernel, quad) * grid.weights)
        done = np.max(np.abs(new.mass - phi.mass)) < tol
        phi = new
        if done:
            break
    return phi, kl_marginal(f_true, phi, kernel, quad), it


def _shared_quadrature(kernel, grids):
    lo = min(g.points[0] for g in grids)
    hi = max(g.points[-1] for g in grids)
    return quadrature_for(kernel, ThetaGrid.counting([lo, hi]) if hi > lo else ThetaGrid.counting([lo]))


def _conjecture_setup(cfg):
    grid = build_grid(cfg.model["grid"])
    kernel = build_kernel(cfg.model["kernel"])
    tg_spec = cfg.opt("true_grid", cfg.model["grid"])
    true_grid = build_grid(tg_spec)
    f = build_truth(cfg.model["truth"], true_grid)
    quad = _shared_quadrature(kernel, [grid, true_grid])
    return grid, true_grid, f, kernel, quad


def _conjecture_rep(cfg, rep_id, tdir, inf_k):
    grid, _, f, kernel, quad = _conjecture_setup(cfg)
    checkpoints = sorted(int(c) for c in cfg.opt("checkpoints", [100, 1000, 10000]) if int(c) <= cfg.n)
    rng = rep_rng(cfg.seed, rep_id)
    x = sample_mixture(f, kernel, rng, cfg.n)[0][:, 0]
    run = newton.run_newton(x, kernel, MixingDensity.uniform(grid), cfg.build_schedule(), record=checkpoints)
    rows = []
    for r, step in enumerate(run.steps):
        k = kl_marginal(f, run.density(r), kernel, quad)
        rows.append((rep_id, int(step), k, inf_k, abs(k - inf_k)))
    same = grid.same_as(f.grid)
    summary = [(rep_id, "newton", kl_theta(f, run.final) if same else "", rows[-1][2], None)]
    return summary, rows


_EXTRA_HEADERS = {
    "npp": ["rep_id", "estimator", "xi", "proj_simplex_count", "proj_box_count"],
    "samc-ising": ["rep_id", "max_abs_logZ_error", "omega_sum", "flagged"],
    "conjecture": ["rep_id", "n", "kl_marginal", "inf_kl_marginal", "gap"],
    "gallery:running-mean": ["rep_id", "x_final", "sample_mean"],
    "gallery:t-quantile": ["rep_id", "x0", "tail_mean", "abs_error"],
    "gallery:eb": ["rep_id", "x_final", "abs_error", "projections"],
    "gallery:saem": ["rep_id", "loglik_saem", "loglik_em", "abs_diff"],
}


def _am_header(cfg):
    p = len(np.atleast_1d(cfg.opt("mean", [3.0])))
    return ["rep_id"] + [f"mu_{j + 1}" for j in range(p)] + [f"sigma_{i + 1}{j + 1}" for i in range(p) for j in range(p)] + ["acceptance"]


def _run_rep(args):
    cfg_dict, rep_id, tdir, extra = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    if cfg.kind in ("newton-finite", "newton-compact"):
        return _newton_rep(cfg, rep_id, tdir)
    if cfg.kind == "compare":
        return _compare_rep(cfg, rep_id, tdir)
    if cfg.kind == "npp":
        return _npp_rep(cfg, rep_id, tdir)
    if cfg.kind == "samc-ising":
        return _samc_rep(cfg, rep_id, tdir)
    if cfg.kind == "conjecture":
        return _conjecture_rep(cfg, rep_id, tdir, extra)
    return _gallery_rep(cfg, rep_id, tdir)


@dataclass
class ExperimentResult:
    out: str
    summary: list
    extra: list
    files: list


def run_experiment(cfg: ExperimentConfig, quiet=True) -> ExperimentResult:
    """Run every replication of ``cfg`` and write its artefacts under ``cfg.out``.

    Files: ``config.json`` (echo), ``traces/`` (per-replication CSVs),
    ``summary.csv`` (``rep_id, estimator, kl_theta, kl_marginal, wall_ms``)
    for the mixture experiments, and ``results.csv`` with kind-specific
    columns.  ``plot`` adds SVG renderings.
    """
    if cfg.kind == "conjecture" and "grid" not in cfg.model:
        raise ConfigError("model.grid: missing")
    if cfg.kind in ("newton-finite", "newton-compact", "compare", "npp"):
        _model(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    tdir = os.path.join(cfg.out, "traces")
    os.makedirs(tdir, exist_ok=True)
    with open(os.path.join(cfg.out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    extra_arg = None
    if cfg.kind == "conjecture":
        grid, _, f, kernel, quad = _conjecture_setup(cfg)
        phi, inf_k, iters = infimum_kl_marginal(f, grid, kernel, quad)
        extra_arg = inf_k
        write_csv(
            os.path.join(cfg.out, "infimum.csv"),
            ["theta", "phi_star"],
            [(t, v) for t, v in zip(grid.points, phi.values)],
        )
    jobs = [(cfg.to_dict(), i, tdir, extra_arg) for i in range(cfg.reps)]
    if cfg.workers > 1 and cfg.reps > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(_run_rep, jobs))
    else:
        results = []
        for j in jobs:
            results.append(_run_rep(j))
            if not quiet:
                print(f"{cfg.kind}: replication {j[1] + 1}/{cfg.reps} done", flush=True)
    summary = [row for s, _ in results for row in s]
    extra = [row for _, e in results for row in e]
    files = [os.path.join(cfg.out, "config.json")]
    if summary:
        p = os.path.join(cfg.out, "summary.csv")
        write_csv(p, SUMMARY_HEADER, summary)
        files.append(p)
    if extra:
        header = _am_header(cfg) if cfg.kind == "gallery:am" else _EXTRA_HEADERS[cfg.kind]
        p = os.path.join(cfg.out, "results.csv")
        write_csv(p, header, extra)
        files.append(p)
    if cfg.plot:
        files.extend(_plots(cfg, tdir))
    return ExperimentResult(cfg.out, summary, extra, files)


def _plots(cfg, tdir):
    from .plotting import emit_plot

    made = []
    if os.path.exists(os.path.join(cfg.out, "summary.csv")):
        p = os.path.join(cfg.out, "summary_kl_marginal.svg")
        emit_plot(os.path.join(cfg.out, "summary.csv"), {"type": "box", "group": "estimator", "y": "kl_marginal"}, p)
        made.append(p)
    first = sorted(os.listdir(tdir))
    name = {
        "gallery:t-quantile": "rep0000_t-quantile.csv",
        "gallery:eb": "rep0000_eb.csv",
        "gallery:am": "rep0000_am.csv",
        "gallery:saem": "rep0000_saem.csv",
        "gallery:running-mean": "rep0000_running-mean.csv",
    }.get(cfg.kind)
    if name in first:
        spec = {"type": "line"}
        if cfg.kind == "gallery:t-quantile":
            spec["reference"] = gallery.t_quantile_root(float(cfg.opt("alpha", 0.75)), float(cfg.opt("nu", 5)))
        elif cfg.kind == "gallery:eb":
            spec["reference"] = float(cfg.opt("xi", 1.0))
        p = os.path.join(cfg.out, name.replace(".csv", ".svg"))
        emit_plot(os.path.join(tdir, name), spec, p)
        made.append(p)
    return made
