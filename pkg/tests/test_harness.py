import json

import numpy as np
import pytest
import yaml

from adasde.cli import main
from adasde.dataset import double_circle_oracle, sample_oracle
from adasde.harness import (
    ConfigError,
    ErrorReport,
    ErrorRow,
    error_decomposition,
    load_config,
    run_experiment,
    summarize,
    write_svg_plot,
)
from adasde.metrics import sliced_w1
from adasde.schedule import build_schedule
from adasde.solvers import SamplerConfig, sample

SMALL_DATA = {"n_points": 400}
ORACLE_FIELD = {"kind": "oracle", "oracle_centers": 400}


@pytest.fixture(scope="module")
def oracle():
    return double_circle_oracle(n_points=2000, seed=0)


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return path


def minimal_config(tmp_path, **extra):
    cfg = {"data": SMALL_DATA, "field": ORACLE_FIELD,
           "sample": {"method": "euler", "n_steps": 5, "n_points": 256}}
    cfg.update(extra)
    return write_config(tmp_path / "cfg.yaml", cfg)


class TestDecomposition:
    def test_oracle_control_within_twice_the_floor(self, oracle):
        report = error_decomposition(oracle, oracle, step_counts=[30], gammas=[0.0, 0.01], n_eval=4000, seed=0)
        floor = sliced_w1(sample_oracle(oracle, 4000, seed=1), sample_oracle(oracle, 4000, seed=2))
        for row in report.rows:
            assert row.gradient_error <= 2 * floor

    def test_gamma_zero_is_plain_ode(self, oracle):
        report = error_decomposition(oracle, oracle, step_counts=[8], gammas=[0.0], n_eval=500, seed=3)
        from adasde.harness import _sub

        plain = sample(SamplerConfig(build_schedule("polynomial", 8), "heun", seed=3), oracle, n_points=500).final
        ref = sample_oracle(oracle, 500, seed=_sub(3, 1))
        assert report.rows[0].total_error == sliced_w1(plain, ref, 128, _sub(3, 3))

    def test_needs_ode_baseline(self, oracle):
        with pytest.raises(ValueError):
            error_decomposition(oracle, oracle, step_counts=[5], gammas=[0.01], n_eval=100)

    def test_report_shape_and_summary(self, oracle):
        r = error_decomposition(oracle, oracle, step_counts=[5, 6], gammas=[0.0, 0.005, 0.01], n_eval=300,
                                method="adasde")
        assert len(r.rows) == 6
        summary = summarize(r)
        assert [s["gamma"] for s in summary] == [0.0, 0.005, 0.01]
        assert all(s["n_rows"] == 2 for s in summary)


class TestReport:
    def test_csv_round_trip(self, tmp_path):
        rep = ErrorReport([ErrorRow("heun", 0.01, 15, 0.1, 0.2, 0.3, 0), ErrorRow("heun", 0.0, 20, 1e-17, 0.5, 0.25, 1)])
        rep.write_csv(tmp_path / "r.csv")
        assert ErrorReport.read_csv(tmp_path / "r.csv").rows == rep.rows

    @pytest.mark.parametrize("bad", [-0.1, float("nan"), float("inf")])
    def test_rejects_invalid_errors(self, bad):
        with pytest.raises(ValueError):
            ErrorRow("heun", 0.0, 15, bad, 0.0, 0.0, 0)

    def test_svg(self, tmp_path):
        write_svg_plot(tmp_path / "p.svg", {"a": ([1, 2, 3], [0.3, 0.2, 0.1]), "b": ([1, 2], [0.1, 0.1])}, "t")
        text = (tmp_path / "p.svg").read_text()
        assert text.count("<polyline") == 2 and text.startswith("<svg")


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg["decompose"]["gammas"] == [0.0, 0.001, 0.005, 0.01]
        assert cfg["data"]["r_outer"] == 0.8

    def test_unknown_key_reports_path(self, tmp_path):
        path = write_config(tmp_path / "c.yaml", {"sample": {"n_stepz": 5}})
        with pytest.raises(ConfigError, match="sample.n_stepz"):
            load_config(path)

    def test_type_error_reports_path(self):
        with pytest.raises(ConfigError, match="train.n_iters"):
            load_config({"train": {"n_iters": "many"}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")

    def test_missing_checkpoint(self, tmp_path):
        cfg = minimal_config(tmp_path, field={"kind": "mlp", "checkpoint": str(tmp_path / "none.csv")})
        with pytest.raises(ConfigError, match="field.checkpoint"):
            run_experiment("sample", cfg, tmp_path / "out")


class TestPipelines:
    def test_sample_smoke_and_manifest(self, tmp_path):
        out = run_experiment("sample", minimal_config(tmp_path), tmp_path / "out")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 0 and len(manifest["config_hash"]) == 64
        assert {"numpy", "scipy", "adasde"} <= set(manifest["versions"])
        assert "samples.csv" in manifest["outputs"]
        assert len((out / "samples.csv").read_text().splitlines()) == 257

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = minimal_config(tmp_path, sample={"method": "adasde", "gamma": 0.05, "n_steps": 5, "n_points": 128})
        a = run_experiment("sample", cfg, tmp_path / "a")
        b = run_experiment("sample", cfg, tmp_path / "b")
        for name in ("samples.csv", "sample_metrics.csv", "schedule.txt", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_seed_override_changes_output(self, tmp_path):
        cfg = minimal_config(tmp_path)
        a = run_experiment("sample", cfg, tmp_path / "a", seed=0)
        b = run_experiment("sample", cfg, tmp_path / "b", seed=1)
        assert (a / "samples.csv").read_bytes() != (b / "samples.csv").read_bytes()

    def test_train_then_sample_from_checkpoint(self, tmp_path):
        cfg = minimal_config(tmp_path, field={"kind": "mlp"},
                             train={"n_iters": 20, "hidden_width": 16, "n_layers": 2, "batch_size": 32})
        out = run_experiment("train", cfg, tmp_path / "t")
        again = run_experiment("train", cfg, tmp_path / "t2")
        assert (out / "checkpoint.csv").read_bytes() == (again / "checkpoint.csv").read_bytes()
        cfg2 = minimal_config(tmp_path, field={"kind": "mlp", "checkpoint": str(out / "checkpoint.csv")})
        s = run_experiment("sample", cfg2, tmp_path / "s")
        assert (s / "samples.csv").exists()

    def test_decompose_and_sweep(self, tmp_path):
        dec = {"step_counts": [5, 6], "n_eval": 200}
        cfg = minimal_config(tmp_path, decompose=dec, sweep={"seeds": [0, 1]})
        out = run_experiment("decompose", cfg, tmp_path / "d")
        rep = ErrorReport.read_csv(out / "error_report.csv")
        assert len(rep.rows) == 8 and {r.gamma for r in rep.rows} == {0.0, 0.001, 0.005, 0.01}
        assert (out / "total_error.svg").exists()
        out2 = run_experiment("sweep", cfg, tmp_path / "w")
        assert len(ErrorReport.read_csv(out2 / "error_report.csv").rows) == 16
        assert len((out2 / "error_summary.csv").read_text().splitlines()) == 5
        again = run_experiment("sweep", cfg, tmp_path / "w2")
        assert (out2 / "error_report.csv").read_bytes() == (again / "error_report.csv").read_bytes()
        # Each seed is measured against its own ground truth, as a standalone run would be.
        single = run_experiment("decompose", cfg, tmp_path / "d1", seed=1)
        seed1 = [r for r in ErrorReport.read_csv(out2 / "error_report.csv").rows if r.seed == 1]
        assert seed1 == ErrorReport.read_csv(single / "error_report.csv").rows

    def test_distill(self, tmp_path):
        cfg = minimal_config(tmp_path, distill={"n_steps": 3, "batch_size": 100, "n_rounds": 1, "inner_iters": 2,
                                                "eval_points": 100, "w1_points": 64})
        out = run_experiment("distill", cfg, tmp_path / "x")
        assert (out / "theta" / "theta.csv").exists()
        header, row = (out / "distill_metrics.csv").read_text().splitlines()
        assert header.startswith("endpoint_mse_neutral")
        mse0, mse1 = (float(v) for v in row.split(",")[:2])
        assert mse1 <= mse0

    def test_sample_with_theta(self, tmp_path):
        cfg = minimal_config(tmp_path, distill={"n_steps": 5, "batch_size": 100, "n_rounds": 1, "inner_iters": 1,
                                                "eval_points": 50, "w1_points": 32})
        out = run_experiment("distill", cfg, tmp_path / "x")
        cfg2 = minimal_config(tmp_path, sample={"method": "adasde", "scheme": "uniform", "n_steps": 5,
                                                "n_points": 64, "theta": str(out / "theta")})
        s = run_experiment("sample", cfg2, tmp_path / "s")
        assert (s / "samples.csv").exists()

    def test_unknown_command(self, tmp_path):
        with pytest.raises(ConfigError):
            run_experiment("fly", None, tmp_path)


class TestCli:
    def test_sample(self, tmp_path, capsys):
        assert main(["sample", "--config", str(minimal_config(tmp_path)), "--out-dir", str(tmp_path / "o")]) == 0
        assert "manifest.json" in capsys.readouterr().out

    def test_bad_key_exits_nonzero(self, tmp_path, capsys):
        path = write_config(tmp_path / "bad.yaml", {"sampel": {}})
        assert main(["sample", "--config", str(path), "--out-dir", str(tmp_path / "o")]) == 1
        assert "sampel" in capsys.readouterr().err

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit):
            main([])
