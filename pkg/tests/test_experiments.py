import csv
import json
import math
import re

import numpy as np
import pytest

from newtonsa import cli, newton
from newtonsa.experiments import (
    PRESETS,
    SUMMARY_HEADER,
    ConfigError,
    ExperimentConfig,
    infimum_kl_marginal,
    preset,
    rep_rng,
    run_experiment,
    write_csv,
)
from newtonsa.mixture import MixingDensity, NormalLocation, ThetaGrid, kl_marginal, quadrature_for
from newtonsa.plotting import PlotError, emit_plot

T_ROOT = 0.726687


def _small_compare(tmp_path, reps=3, **kw):
    return preset("finite-binomial", reps=reps, n=30, out=str(tmp_path), options={"n_particles": 50, "alpha": 1.0}, **kw)


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_valid(self, name):
        cfg = preset(name)
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_top_key(self):
        with pytest.raises(ConfigError, match="^colour: unknown key"):
            ExperimentConfig.from_dict({"kind": "npp", "colour": 1})

    def test_unknown_option_names_field(self):
        with pytest.raises(ConfigError, match=r"options\.bogus"):
            ExperimentConfig.from_dict({"kind": "compare", "options": {"bogus": 1}})

    def test_bad_schedule(self):
        with pytest.raises(ConfigError, match="^schedule:"):
            ExperimentConfig.from_dict({"kind": "npp", "schedule": {"kind": "power", "gamma": 0.4}})

    def test_integer_fields(self):
        with pytest.raises(ConfigError, match="^reps:"):
            ExperimentConfig.from_dict({"kind": "npp", "reps": 2.5})
        with pytest.raises(ConfigError, match="^seed:"):
            ExperimentConfig.from_dict({"kind": "npp", "seed": -1})

    def test_cli_unknown_key_exit_2(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"kind": "compare", "nn": 5}))
        assert cli.main(["compare", "--config", str(p), "--quiet"]) == 2
        assert "nn: unknown key" in capsys.readouterr().err

    def test_cli_kind_mismatch_exit_2(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(dict(PRESETS["npp-binomial"], out=str(tmp_path / "o"))))
        assert cli.main(["compare", "--config", str(p), "--quiet"]) == 2
        assert "does not match subcommand" in capsys.readouterr().err

    def test_cli_missing_file_exit_2(self, tmp_path):
        assert cli.main(["npp", "--config", str(tmp_path / "none.json"), "--quiet"]) == 2

    def test_cli_invalid_json_exit_2(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{kind: npp")
        assert cli.main(["npp", "--config", str(p), "--quiet"]) == 2


class TestReplication:
    def test_rep_streams_distinct(self):
        a = rep_rng(0, 0).random(5)
        b = rep_rng(0, 1).random(5)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, rep_rng(0, 0).random(5))

    def test_rep_stream_is_spawn_key(self):
        ref = np.random.default_rng(np.random.SeedSequence(7).spawn(3)[2]).random(4)
        np.testing.assert_array_equal(rep_rng(7, 2).random(4), ref)

    def test_more_reps_leave_earlier_unchanged(self, tmp_path):
        a = run_experiment(_small_compare(tmp_path / "a", reps=2))
        b = run_experiment(_small_compare(tmp_path / "b", reps=4))
        assert b.summary[: len(a.summary)] == a.summary
        for name in ("rep0000_nr.csv", "rep0001_npb.csv"):
            assert (tmp_path / "a" / "traces" / name).read_bytes() == (tmp_path / "b" / "traces" / name).read_bytes()

    def test_byte_reproducible(self, tmp_path):
        ra = run_experiment(_small_compare(tmp_path / "a"))
        rb = run_experiment(_small_compare(tmp_path / "b"))
        assert len(ra.files) == len(rb.files)
        for fa, fb in zip(ra.files, rb.files):
            if fa.endswith(".csv"):
                assert open(fa, "rb").read() == open(fb, "rb").read()
        for t in (tmp_path / "a" / "traces").iterdir():
            assert t.read_bytes() == (tmp_path / "b" / "traces" / t.name).read_bytes()

    def test_workers_match_serial(self, tmp_path):
        run_experiment(_small_compare(tmp_path / "a"))
        run_experiment(_small_compare(tmp_path / "b", workers=2))
        assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()

    def test_summary_integrity(self, tmp_path):
        run_experiment(_small_compare(tmp_path, reps=4))
        rows = _read(tmp_path / "summary.csv")
        assert rows[0] == SUMMARY_HEADER
        pairs = [(r[0], r[1]) for r in rows[1:]]
        assert len(pairs) == len(set(pairs)) == 12
        trace_reps = {p.name[3:7] for p in (tmp_path / "traces").iterdir()}
        assert {f"{int(r):04d}" for r, _ in pairs} == trace_reps
        for r in rows[1:]:
            assert float(r[2]) >= 0 and float(r[3]) >= 0
            assert r[4] == ""

    def test_timing_fills_wall_ms(self, tmp_path):
        run_experiment(_small_compare(tmp_path, reps=1, timing=True))
        for r in _read(tmp_path / "summary.csv")[1:]:
            assert float(r[4]) > 0

    def test_floats_round_trip(self, tmp_path):
        p = tmp_path / "x.csv"
        write_csv(p, ["a", "b"], [(1, 0.1 + 0.2), (2, math.pi)])
        body = _read(p)[1:]
        assert float(body[0][1]) == 0.1 + 0.2 and float(body[1][1]) == math.pi
        assert body[0][0] == "1"

    def test_config_echo(self, tmp_path):
        cfg = _small_compare(tmp_path)
        run_experiment(cfg)
        assert ExperimentConfig.from_dict(json.loads((tmp_path / "config.json").read_text())) == cfg


class TestKinds:
    def test_newton_compact_estimate(self, tmp_path):
        res = run_experiment(preset("compact-beta", out=str(tmp_path)))
        rows = _read(tmp_path / "traces" / "rep0000_estimate.csv")
        assert rows[0] == ["theta", "value"] and len(rows) == 202
        assert float(rows[1][0]) == 0.0 and float(rows[-1][0]) == 1.0
        assert (tmp_path / "traces" / "rep0000_newton.csv").exists()
        assert res.summary[0][1] == "newton"

    def test_npp_results(self, tmp_path):
        run_experiment(preset("npp-binomial", reps=2, out=str(tmp_path)))
        rows = _read(tmp_path / "results.csv")
        assert rows[0] == ["rep_id", "estimator", "xi", "proj_simplex_count", "proj_box_count"]
        assert len(rows) == 7

    def test_samc_results(self, tmp_path):
        run_experiment(preset("ising-d10", n=20_000, out=str(tmp_path)))
        rows = _read(tmp_path / "results.csv")
        assert float(rows[1][2]) == 1024.0
        assert not (tmp_path / "summary.csv").exists()

    @pytest.mark.parametrize("name", ["running-mean", "t-quantile", "eb", "am", "saem"])
    def test_gallery_kinds_run(self, tmp_path, name):
        res = run_experiment(preset(f"gallery:{name}", reps=1, n=200, out=str(tmp_path)))
        assert any(f.endswith("results.csv") for f in res.files)


class TestConjecture:
    def test_well_specified_infimum_zero(self):
        g = ThetaGrid.counting(np.arange(-2.0, 3.0))
        k = NormalLocation(1.0)
        f = MixingDensity.from_mass(g, [0.1, 0.2, 0.4, 0.2, 0.1])
        phi, inf_k, _ = infimum_kl_marginal(f, g, k, quadrature_for(k, g))
        assert inf_k < 1e-8

    def test_symmetric_minimiser(self):
        g = ThetaGrid.counting([-0.5, 0.5])
        star = ThetaGrid.counting([0.0])
        k = NormalLocation(1.0)
        f = MixingDensity.uniform(star)
        quad = quadrature_for(k, ThetaGrid.counting([-0.5, 0.5]))
        phi, inf_k, _ = infimum_kl_marginal(f, g, k, quad)
        assert abs(phi.mass[0] - phi.mass[1]) < 1e-6
        assert inf_k == pytest.approx(kl_marginal(f, MixingDensity.uniform(g), k, quad), abs=1e-12)
        # any asymmetric phi does worse
        for p in (0.3, 0.45, 0.6):
            assert kl_marginal(f, MixingDensity.from_mass(g, [p, 1 - p]), k, quad) >= inf_k - 1e-15

    def test_experiment_outputs(self, tmp_path):
        run_experiment(preset("conjecture", reps=2, n=1000, out=str(tmp_path)))
        rows = _read(tmp_path / "results.csv")
        assert rows[0] == ["rep_id", "n", "kl_marginal", "inf_kl_marginal", "gap"]
        assert [r[1] for r in rows[1:]] == ["100", "1000"] * 2
        summary = _read(tmp_path / "summary.csv")
        assert all(r[2] == "" for r in summary[1:])
        assert (tmp_path / "infimum.csv").exists()


class TestCLI:
    def test_success_lists_files(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert cli.main(["gallery", "running-mean", "--out", str(out), "--n", "50"]) == 0
        printed = capsys.readouterr().out.split()
        assert str(out / "results.csv") in printed

    def test_box_plot_column(self, tmp_path):
        p = tmp_path / "s.csv"
        write_csv(p, ["rep_id", "estimator", "kl"], [(0, "nr", 0.1), (0, "npml", 0.2)])
        svg = tmp_path / "b.svg"
        args = ["plot", str(p), "--type", "box", "--group", "estimator", "--out", str(svg), "--quiet"]
        assert cli.main(args + ["--y", "kl"]) == 0
        assert svg.exists()
        assert cli.main(args + ["--y", "kl", "rep_id"]) == 2

    def test_newton_on_compare_preset(self, tmp_path):
        assert cli.main(["newton", "--preset", "finite-two-atoms", "--reps", "2", "--n", "20", "--out", str(tmp_path), "--quiet"]) == 0
        assert len(_read(tmp_path / "summary.csv")) == 3

    def test_numeric_failure_exit_3(self, tmp_path, capsys, monkeypatch):
        real = newton._posterior_mass
        calls = {"n": 0}

        def fail_on_seventh(mass, ll, x):
            calls["n"] += 1
            if calls["n"] == 7:
                raise newton.ZeroMarginalError(x)
            return real(mass, ll, x)

        monkeypatch.setattr(newton, "_posterior_mass", fail_on_seventh)
        code = cli.main(["newton", "--preset", "compact-beta", "--out", str(tmp_path), "--quiet"])
        err = capsys.readouterr().err
        assert code == 3
        assert "newtonsa.newton" in err and "at iteration 7" in err

    def test_plot_subcommand(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, ["n", "x"], [(i, 1.0 / (i + 1)) for i in range(10)])
        assert cli.main(["plot", str(p), "--out", str(tmp_path / "t.svg"), "--quiet"]) == 0
        assert cli.main(["plot", str(tmp_path / "none.csv"), "--out", str(tmp_path / "u.svg"), "--quiet"]) == 2


class TestPlot:
    def test_t_quantile_polylines(self, tmp_path):
        run_experiment(preset("gallery:t-quantile", reps=1, n=2000, out=str(tmp_path), plot=True))
        svg = (tmp_path / "rep0000_t-quantile.svg").read_text()
        assert svg.count("<polyline") == 3
        assert svg.count('stroke-dasharray="4 3"') == 1

    def test_reference_line_position(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, ["n", "a"], [(0, 0.0), (1, 2.0)])
        svg = emit_plot(str(p), {"type": "line", "reference": T_ROOT}, str(tmp_path / "t.svg"))
        text = open(svg).read()
        y = float(re.search(r'<line x1="[^"]+" y1="([^"]+)"[^>]*stroke-dasharray', text).group(1))
        # y range [-0.1, 2.1] after 5% padding; plot height 400 - 30 - 50
        expected = 30 + (2.1 - T_ROOT) / 2.2 * 320
        assert y == pytest.approx(expected, abs=0.01)

    def test_empty_trace_no_file(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("n,x\n")
        with pytest.raises(PlotError):
            emit_plot(str(p), {"type": "line"}, str(tmp_path / "e.svg"))
        assert not (tmp_path / "e.svg").exists()

    def test_malformed_row(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("n,x\n1,2\n3\n")
        with pytest.raises(PlotError, match="row 3"):
            emit_plot(str(p), {"type": "line"}, str(tmp_path / "m.svg"))

    def test_deterministic(self, tmp_path):
        p = tmp_path / "s.csv"
        write_csv(p, SUMMARY_HEADER, [(i % 5, ["nr", "npml"][i % 2], 0.1 * i, 0.01 * i * i, None) for i in range(20)])
        a = emit_plot(str(p), {"type": "box"}, str(tmp_path / "a.svg"))
        b = emit_plot(str(p), {"type": "box"}, str(tmp_path / "b.svg"))
        assert open(a, "rb").read() == open(b, "rb").read()
        boxes = re.findall(r'<rect [^>]*fill="none" stroke="(#[0-9a-f]{6})"', open(a).read())
        assert boxes == ["#1f77b4", "#d62728"]
