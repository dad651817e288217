import csv
import math

import numpy as np
import pytest
from scipy.special import ndtri

from shrinkci import cli
from shrinkci import moments as mom
from shrinkci import pipeline as pl

Z975 = float(ndtri(0.975))


def write_units(path, y, se, x=None, weight=None):
    cols = ["y", "se"] + (["x1"] if x is not None else []) + (
        ["weight"] if weight is not None else []
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(y)):
            row = [y[i], se[i]]
            if x is not None:
                row.append(x[i])
            if weight is not None:
                row.append(weight[i])
            w.writerow(row)


def read_output(path):
    header = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
            else:
                fh_rest = [line] + fh.readlines()
                reader = csv.DictReader(fh_rest)
                rows = list(reader)
                break
    return header, rows


class TestFitCommand:
    def test_matches_library_fit(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 30
        y = rng.normal(0, 1.5, n)
        se = rng.uniform(0.5, 2.0, n)
        inp = tmp_path / "in.csv"
        out = tmp_path / "out.csv"
        write_units(str(inp), y, se)
        code = cli.main(["fit", "--input", str(inp), "--output", str(out)])
        assert code == 0
        header, rows = read_output(str(out))
        data = [mom.UnitRecord(y=float(y[i]), sigma=float(se[i])) for i in range(n)]
        res = pl.fit(data)
        assert float(header["mu2"]) == res.moments.mu2
        assert float(header["kappa"]) == res.moments.kappa
        assert len(rows) == n
        for row, exp in zip(rows, res.outputs):
            assert float(row["theta_hat"]) == exp.theta_hat
            assert float(row["lower"]) == exp.lower
            assert float(row["upper"]) == exp.upper

    def test_large_roundtrip_lossless(self, tmp_path):
        rng = np.random.default_rng(1)
        n = 100_000
        y = rng.normal(0, 1, n)
        se = rng.uniform(0.5, 1.5, n)
        inp = tmp_path / "in.csv"
        out1 = tmp_path / "out1.csv"
        out2 = tmp_path / "out2.csv"
        write_units(str(inp), y, se)
        assert cli.main([
            "fit", "--input", str(inp), "--output", str(out1), "--method", "unshrunk",
        ]) == 0
        # re-emit the parsed output: repr round-trips exactly
        _, rows = read_output(str(out1))
        reparsed = [(float(r["theta_hat"]), float(r["lower"]), float(r["upper"])) for r in rows]
        with open(out2, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theta_hat", "lower", "upper"])
            for t in reparsed:
                w.writerow([repr(v) for v in t])
        _, rows2 = read_output(str(out2))
        for a, b in zip(rows, rows2):
            assert a["theta_hat"] == b["theta_hat"]
            assert a["lower"] == b["lower"]

    def test_missing_se_column_exit_2(self, tmp_path, capsys):
        inp = tmp_path / "in.csv"
        inp.write_text("y,sigma\n1.0,0.5\n")
        out = tmp_path / "out.csv"
        assert cli.main(["fit", "--input", str(inp), "--output", str(out)]) == 2
        assert "se" in capsys.readouterr().err

    def test_bad_number_names_column_and_line(self, tmp_path, capsys):
        inp = tmp_path / "in.csv"
        inp.write_text("y,se\n1.0,0.5\nNOPE,0.7\n")
        out = tmp_path / "out.csv"
        assert cli.main(["fit", "--input", str(inp), "--output", str(out)]) == 2
        err = capsys.readouterr().err
        assert "line 3" in err and "'y'" in err

    def test_alpha_out_of_range_exit_4(self, tmp_path, capsys):
        inp = tmp_path / "in.csv"
        inp.write_text("y,se\n1.0,0.5\n")
        assert cli.main([
            "fit", "--input", str(inp), "--output", str(tmp_path / "o.csv"),
            "--alpha", "1.5",
        ]) == 4

    def test_weight_column_used(self, tmp_path):
        rng = np.random.default_rng(2)
        n = 20
        y = rng.normal(0, 1, n)
        se = rng.uniform(0.5, 1.0, n)
        weight = rng.uniform(0.1, 1.0, n)
        inp = tmp_path / "in.csv"
        out = tmp_path / "out.csv"
        write_units(str(inp), y, se, weight=weight)
        assert cli.main(["fit", "--input", str(inp), "--output", str(out)]) == 0
        header, _ = read_output(str(out))
        data = [
            mom.UnitRecord(y=float(y[i]), sigma=float(se[i]), omega=float(weight[i]))
            for i in range(n)
        ]
        res = pl.fit(data, weights="record")
        assert float(header["mu2"]) == res.moments.mu2

    def test_config_file_defaults_and_flag_precedence(self, tmp_path):
        rng = np.random.default_rng(3)
        y = rng.normal(0, 1, 15)
        se = np.full(15, 1.0)
        inp = tmp_path / "in.csv"
        write_units(str(inp), y, se)
        cfg = tmp_path / "run.cfg"
        cfg.write_text("alpha=0.10\nmethod=unshrunk\n")
        out1 = tmp_path / "o1.csv"
        assert cli.main([
            "fit", "--input", str(inp), "--output", str(out1), "--config", str(cfg),
        ]) == 0
        header, rows = read_output(str(out1))
        assert header["alpha"] == "0.1" and header["method"] == "unshrunk"
        half = float(rows[0]["half_length"])
        assert half == pytest.approx(float(ndtri(0.95)), rel=1e-12)
        # explicit flag beats the config value
        out2 = tmp_path / "o2.csv"
        assert cli.main([
            "fit", "--input", str(inp), "--output", str(out2),
            "--config", str(cfg), "--alpha", "0.05",
        ]) == 0
        header2, _ = read_output(str(out2))
        assert header2["alpha"] == "0.05"


class TestCurvesCommand:
    def test_curve_properties(self, tmp_path):
        out = tmp_path / "curves.csv"
        assert cli.main([
            "curves", "--output", str(out), "--points", "12",
            "--m2-min", "0.05", "--m2-max", "20", "--kappas", "3",
        ]) == 0
        _, rows = read_output(str(out))
        by_kappa = {}
        for r in rows:
            by_kappa.setdefault(r["kappa"], []).append(r)
        assert set(by_kappa) == {"3.0", "inf"}
        for r in rows:
            m2 = float(r["m2"])
            assert float(r["cva_parametric"]) == pytest.approx(
                Z975 * math.sqrt(1 + m2), rel=1e-12
            )
            if m2 == 0.0:
                assert float(r["cva"]) == pytest.approx(Z975, abs=1e-7)
        for fin, inf in zip(by_kappa["3.0"], by_kappa["inf"]):
            assert float(fin["cva"]) <= float(inf["cva"]) + 1e-7


class TestCvaCommand:
    def test_values_match_library(self, tmp_path):
        out = tmp_path / "cva.csv"
        assert cli.main(["cva", "--m2", "0,1,4", "--output", str(out)]) == 0
        _, rows = read_output(str(out))
        from shrinkci import worstcase as wc
        for r in rows:
            m2 = float(r["m2"])
            assert float(r["cva"]) == pytest.approx(
                wc._cva_scalar(m2, None, 0.05), abs=1e-7
            )
            assert float(r["noncoverage"]) <= 0.05 + 1e-5


class TestSimulateCommand:
    ARGS = [
        "--reps", "4", "--n", "30", "--theta-kinds", "normal,two_point",
        "--snr", "0.5", "--methods", "robust_mu2,unshrunk", "--seed", "12",
    ]

    def test_byte_identical_across_runs_and_workers(self, tmp_path):
        outs = []
        for i, workers in enumerate(("1", "1", "2")):
            out = tmp_path / f"sim{i}.csv"
            assert cli.main([
                "simulate", "--output", str(out), "--workers", workers, *self.ARGS,
            ]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_smoke_runtime_single_rep(self, tmp_path):
        import time
        out = tmp_path / "sim.csv"
        start = time.time()
        assert cli.main([
            "simulate", "--output", str(out), "--reps", "1", "--n", "100",
            "--theta-kinds", "normal", "--snr", "0.5",
            "--methods", "robust_mu2_kappa", "--seed", "1", "--workers", "1",
        ]) == 0
        assert time.time() - start < 10.0

    def test_missing_het_input_exit_2(self, tmp_path):
        assert cli.main([
            "simulate", "--output", str(tmp_path / "o.csv"),
            "--het-input", str(tmp_path / "missing.csv"), "--reps", "2",
        ]) == 2

    def test_workers_env_var_honored_and_flag_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.WORKERS_ENV, "2")
        out_env = tmp_path / "env.csv"
        assert cli.main(["simulate", "--output", str(out_env), *self.ARGS]) == 0
        out_flag = tmp_path / "flag.csv"
        assert cli.main([
            "simulate", "--output", str(out_flag), "--workers", "1", *self.ARGS,
        ]) == 0
        # worker count never changes the report, so both paths agree
        assert out_env.read_bytes() == out_flag.read_bytes()


class TestPowerCommand:
    def test_grid_has_both_signs_of_power_difference(self, tmp_path):
        out = tmp_path / "power.csv"
        assert cli.main([
            "power", "--output", str(out), "--d-steps", "9", "--w-steps", "5",
            "--d-max", "3.0", "--w-min", "0.1", "--w-max", "0.9",
        ]) == 0
        _, rows = read_output(str(out))
        diffs = [float(r["power_difference"]) for r in rows]
        assert any(d > 0.01 for d in diffs)
        assert any(d < -0.01 for d in diffs)
        assert all(0 <= float(r["power_robust"]) <= 1 for r in rows)
