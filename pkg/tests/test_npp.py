import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from newtonsa.core_sa import WeightSchedule
from newtonsa.mixture import MixingDensity, NormalUnknownVariance, ThetaGrid, binomial_on_grid, quadrature_for, sample_mixture
from newtonsa.newton import h_map
from newtonsa.npp import (
    DEFAULT_FLOOR,
    NPConfig,
    NPState,
    UnderflowError,
    H_rep,
    bayes_update,
    dH_dpsi_closed_form,
    np4_bound_scan,
    summability_partial_sums,
    npp_step,
    row_ss,
    run_npp,
    u_kj,
    write_trace,
)

THETAS = np.arange(-4.0, 5.0)
SIGMA2 = 1.5
R = 10


@pytest.fixture(scope="module")
def binom_model():
    g = ThetaGrid.counting(THETAS)
    return g, binomial_on_grid(g, 8, 0.5)


def _rows(f, n, seed, r=R, psi=SIGMA2):
    x, _ = sample_mixture(f, NormalUnknownVariance(), np.random.default_rng(seed), n, r=r, psi=psi)
    return x


class TestVariancePlugins:
    def test_first_row_ignores_prev(self):
        from newtonsa.npp import ube_update

        assert ube_update(123.0, 1, [1.0, 2.0, 3.0]) == 1.0

    def test_running_mean(self):
        from newtonsa.npp import ube_update

        row = [0.0, 2 * math.sqrt(2.0)]  # sample variance 4
        assert ube_update(2.0, 2, row) == pytest.approx(3.0, abs=1e-15)

    def test_needs_replicates(self):
        from newtonsa.npp import ube_update

        with pytest.raises(ValueError):
            ube_update(1.0, 1, [1.0])

    def test_recursion_equals_pooled_form(self):
        from newtonsa.npp import ube_update

        rows = np.random.default_rng(0).normal(size=(50, 4))
        xi = 0.0
        for i, row in enumerate(rows, start=1):
            xi = ube_update(xi, i, row)
        assert xi == pytest.approx(np.mean(rows.var(axis=1, ddof=1)), rel=1e-13)

    def test_bayes_values(self):
        assert bayes_update(1, 7.0, 10) == 1.0
        with pytest.raises(ValueError, match="undefined"):
            bayes_update(1, 3.0, 3)

    @given(st.integers(1, 200), st.integers(2, 12), st.integers(0, 2**31))
    def test_bayes_ube_ratio(self, i, r, seed):
        if i * (r - 1) <= 2:
            return
        rows = np.random.default_rng(seed).normal(size=(i, r))
        pooled = sum(row_ss(row) for row in rows)
        ube = pooled / (i * (r - 1))
        bay = bayes_update(i, pooled, r)
        assert bay * (i * (r - 1) - 2) == pytest.approx(ube * i * (r - 1), rel=1e-12)

    def test_unbiased(self):
        rows = np.random.default_rng(1).normal(0.0, math.sqrt(SIGMA2), size=(100_000, R))
        s2 = rows.var(axis=1, ddof=1)
        assert abs(s2.mean() - SIGMA2) <= 3 * s2.std(ddof=1) / math.sqrt(s2.size)


class TestHRep:
    def test_symmetric_row_gives_zero(self):
        H = H_rep([-0.5, 0.5, 0.0], [0.5, 0.5], 1.0, [-1.0, 1.0])
        np.testing.assert_allclose(H, 0.0, atol=1e-15)

    def test_sums_to_zero(self):
        rows = np.random.default_rng(2).normal(size=(200, R)) * 3
        H = H_rep(rows, np.full(9, 1 / 9), SIGMA2, THETAS)
        np.testing.assert_allclose(H.sum(axis=1), 0.0, atol=1e-15)

    def test_full_and_sufficient_forms_agree(self):
        rng = np.random.default_rng(3)
        rows = rng.normal(rng.uniform(-5, 5, size=(500, 1)), 1.3, size=(500, R))
        phi = rng.dirichlet(np.ones(9))
        a = H_rep(rows, phi, 1.7, THETAS, form="full")
        b = H_rep(rows, phi, 1.7, THETAS, form="sufficient")
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_batch_matches_rows(self):
        rows = np.random.default_rng(4).normal(size=(20, R))
        phi = np.full(9, 1 / 9)
        batch = H_rep(rows, phi, 1.0, THETAS)
        for j, row in enumerate(rows):
            np.testing.assert_array_equal(batch[j], H_rep(row, phi, 1.0, THETAS))

    def test_far_rows_stay_finite(self):
        H = H_rep(np.full(R, 300.0), np.full(9, 1 / 9), 1e-4, THETAS)
        assert np.all(np.isfinite(H))
        assert H[-1] == pytest.approx(8 / 9, abs=1e-14)

    def test_underflow_is_an_error(self):
        with pytest.raises(UnderflowError):
            H_rep(np.zeros(R), np.zeros(9), 1.0, THETAS)

    def test_mean_field_zero_at_truth(self, binom_model):
        g, f = binom_model
        rows = _rows(f, 1_000_000, 5)
        H = H_rep(rows, f.mass, SIGMA2, THETAS)
        se = H.std(axis=0, ddof=1) / math.sqrt(H.shape[0])
        assert np.all(np.abs(H.mean(axis=0)) <= 3 * se + 1e-15)

    def test_drift_matches_newton_on_mean_kernel(self, binom_model):
        g, f = binom_model
        phi = MixingDensity.from_mass(g, np.random.default_rng(6).dirichlet(np.full(9, 2.0)))
        k = NormalUnknownVariance().mean_kernel(SIGMA2, R)
        h = h_map(phi, f, k, quadrature_for(k, g))
        rows = _rows(f, 400_000, 7)
        H = H_rep(rows, phi.mass, SIGMA2, THETAS)
        se = H.std(axis=0, ddof=1) / math.sqrt(H.shape[0])
        assert np.all(np.abs(H.mean(axis=0) - h) <= 3 * se)


class TestStep:
    def test_degenerate_symmetric_row(self):
        cfg = NPConfig(np.array([-1.0, 1.0]))
        st0 = NPState(0, np.array([0.5, 0.5]), 1.0)
        out = npp_step(st0, [-1.0, 1.0], 0.5, cfg)
        np.testing.assert_allclose(out.f, st0.f, atol=1e-15)
        assert out.xi == 2.0

    def test_variance_first(self):
        cfg = NPConfig(THETAS)
        st0 = NPState(0, np.full(9, 1 / 9), 1000.0)
        row = np.random.default_rng(8).normal(2.0, 1.0, R)
        out = npp_step(st0, row, 0.5, cfg)
        xi = row.var(ddof=1)
        assert out.xi == pytest.approx(xi, rel=1e-14)
        np.testing.assert_allclose(out.f, st0.f + 0.5 * H_rep(row, st0.f, xi, THETAS), atol=1e-15)

    def test_interior_small_weight_no_projection(self, binom_model):
        g, f = binom_model
        rows = _rows(f, 100, 9)
        run = run_npp(rows, g, schedule=WeightSchedule("power", a=0.01, gamma=1.0))
        assert run.proj_simplex[-1] == 0 and run.proj_box[-1] == 0

    def test_floor_enforced(self, binom_model):
        g, f = binom_model
        rows = _rows(f, 300, 10)
        run = run_npp(rows, g, floor=1e-3)
        assert np.all(run.masses.min(axis=1) >= 1e-3)
        np.testing.assert_allclose(run.masses.sum(axis=1), 1.0, atol=1e-12)

    def test_bad_estimator(self):
        with pytest.raises(ValueError):
            NPConfig(THETAS, estimator="mle")


class TestRun:
    def test_degenerate_rows_hit_box(self):
        g = ThetaGrid.counting(THETAS)
        rows = np.repeat(np.array([[0.0], [1.0], [-2.0]]), R, axis=1)
        run = run_npp(rows, g)
        np.testing.assert_array_equal(run.xis[1:], DEFAULT_FLOOR)
        assert run.proj_box[-1] == 3

    def test_xi_near_truth(self, binom_model):
        g, f = binom_model
        inside = sum(1.3 <= run_npp(_rows(f, 100, s), g).xi <= 1.7 for s in range(100))
        assert inside >= 95

    def test_ube_and_bayes_agree(self, binom_model):
        g, f = binom_model
        rows = _rows(f, 100, 11)
        a = run_npp(rows, g, estimator="ube")
        b = run_npp(rows, g, estimator="bayes")
        assert abs(a.xi - b.xi) < 0.01
        assert b.xi == pytest.approx(a.xi * 900 / 898, rel=1e-12)
        assert a.meta["recursive"] and not b.meta["recursive"]

    def test_empty_and_single_replicate(self, binom_model):
        g, _ = binom_model
        with pytest.raises(ValueError):
            run_npp(np.empty((0, R)), g)
        with pytest.raises(ValueError):
            run_npp(np.zeros((5, 1)), g)

    def test_trace(self, tmp_path, binom_model):
        g, f = binom_model
        run = run_npp(_rows(f, 5, 12), g)
        write_trace(tmp_path / "t.csv", run)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "n,xi," + ",".join(f"f_{k}" for k in range(1, 10)) + ",proj_simplex_count,proj_box_count"
        assert len(lines) == 7


class TestBoundScan:
    def test_example_geometry(self):
        scan = np4_bound_scan(THETAS, R, s_max=50.0, n_s=401, n_psi=21)
        assert np.all(scan.interior_max())
        assert np.all(scan.boundary_ratio() < 0.5)

    def test_single_theta(self):
        scan = np4_bound_scan([0.0], R, n_s=51, n_psi=5)
        np.testing.assert_array_equal(scan.sup, [0.0])

    def test_u_kj_values(self):
        u0 = u_kj(0.0, [1.0, -2.0])
        u10 = u_kj(10.0, [1.0, -2.0])
        # theta_k = 1, theta_j = -2
        assert u0[0, 1] == 1 - 4
        assert u10[0, 1] == 1 - 4 + 2 * 10 * (-2 - 1)
        np.testing.assert_array_equal(np.diag(u10), 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-20, 20), st.floats(0.05, 20), st.integers(0, 2**31))
    def test_closed_form_matches_differences(self, s, psi, seed):
        phi = np.random.default_rng(seed).dirichlet(np.ones(9))
        h = 1e-5 * psi
        row = np.array([s, s])
        fd = (H_rep(row, phi, psi + h, THETAS) - H_rep(row, phi, psi - h, THETAS)) / (2 * h)
        # a two-draw row with mean s, so r = 2 in the closed form
        exact = dH_dpsi_closed_form(s, phi, psi, THETAS, 2)
        np.testing.assert_allclose(fd, exact, atol=1e-6 * max(1.0, np.abs(exact).max()))


class TestScheduleSummability:
    def test_partial_sums_settle(self):
        ns, sums = summability_partial_sums(WeightSchedule("harmonic"), 10**7)
        terms = np.diff(sums)
        assert np.all(terms[ns[1:] > 10**6] < 1e-6)
        assert np.all(terms > 0)
        # tail beyond n is below 2 sqrt(2 log log N) / sqrt(n)
        tail = sums[-1] - sums[ns == 10**6][0]
        assert tail < 2 * math.sqrt(2 * math.log(math.log(1e7))) / math.sqrt(1e6)
