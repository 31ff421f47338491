import json

import numpy as np
import pytest

from ddstack import (DataError, Dataset, EstimatorSettings, ddml_atet,
                     ddml_plm, make_folds)
from ddstack.cli import main
from ddstack.learners import LearnerSpec, make_spec


def write_linear_csv(path, n=200, seed=0, binary_d=False):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    if binary_d:
        d = (x[:, 0] + rng.standard_normal(n) > 0).astype(float)
    else:
        d = x[:, 0] + rng.standard_normal(n)
    y = 1.5 * d + x @ np.array([1.0, -0.5, 0.2]) + rng.standard_normal(n)
    header = "y,d,x1,x2,x3"
    rows = [f"{y[i]},{d[i]},{x[i, 0]},{x[i, 1]},{x[i, 2]}" for i in range(n)]
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return y, d, x


def write_config(path, csv_path, extra=""):
    path.write_text(f"""
master_seed = 9

[data]
path = "{csv_path}"
outcome = "y"
treatments = ["d"]

[estimator]
mode = "short"
final = "cls"
K = 2
R = 1
learners = ["ols"]
{extra}
""")


def read_report(out_dir):
    return json.loads((out_dir / "report.json").read_text())


class TestEstimatePlm:
    def test_j1_ols_matches_residual_oracle(self, tmp_path):
        csv_path = tmp_path / "data.csv"
        y, d, x = write_linear_csv(csv_path)
        cfg = tmp_path / "cfg.toml"
        write_config(cfg, csv_path)
        out = tmp_path / "out"
        assert main(["estimate-plm", "--config", str(cfg),
                     "--out", str(out)]) == 0
        report = read_report(out)

        # independent two-stage computation: cross-fitted OLS residuals,
        # then the residual-on-residual ratio
        folds = make_folds(len(y), 2, seed=9)
        ell = np.empty(len(y))
        m = np.empty(len(y))
        for k in (1, 2):
            tr, te = folds.complement(k), folds.indices(k)
            design = np.column_stack([np.ones(len(tr)), x[tr]])
            test_design = np.column_stack([np.ones(len(te)), x[te]])
            ell[te] = test_design @ np.linalg.lstsq(design, y[tr],
                                                    rcond=None)[0]
            m[te] = test_design @ np.linalg.lstsq(design, d[tr],
                                                  rcond=None)[0]
        theta_ref = ((y - ell) @ (d - m)) / ((d - m) @ (d - m))
        assert report["aggregate"]["theta_hat"][0] == pytest.approx(
            theta_ref, abs=1e-10)

    def test_missing_column_exits_2(self, tmp_path, capsys):
        csv_path = tmp_path / "data.csv"
        write_linear_csv(csv_path)
        cfg = tmp_path / "cfg.toml"
        cfg.write_text(f"""
[data]
path = "{csv_path}"
outcome = "y"
treatments = ["nope"]

[estimator]
learners = ["ols"]
""")
        assert main(["estimate-plm", "--config", str(cfg),
                     "--out", str(tmp_path / "out")]) == 2
        assert "error=config" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path, capsys):
        assert main(["estimate-plm", "--config", str(tmp_path / "no.toml"),
                     "--out", str(tmp_path / "out")]) == 2

    def test_r5_median_internal_consistency(self, tmp_path):
        csv_path = tmp_path / "data.csv"
        write_linear_csv(csv_path)
        cfg = tmp_path / "cfg.toml"
        write_config(cfg, csv_path, extra="")
        cfg.write_text(cfg.read_text().replace("R = 1", "R = 5"))
        out = tmp_path / "out"
        assert main(["estimate-plm", "--config", str(cfg),
                     "--out", str(out)]) == 0
        report = read_report(out)
        per_rep = [r["estimate"]["theta_hat"][0]
                   for r in report["repetitions"]]
        assert len(per_rep) == 5
        assert report["aggregate"]["theta_hat"][0] == np.median(per_rep)

    def test_seed_flag_overrides_config(self, tmp_path):
        csv_path = tmp_path / "data.csv"
        write_linear_csv(csv_path)
        cfg = tmp_path / "cfg.toml"
        write_config(cfg, csv_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["estimate-plm", "--config", str(cfg), "--out", str(out_a)])
        main(["estimate-plm", "--config", str(cfg), "--seed", "123",
              "--out", str(out_b)])
        assert read_report(out_a)["master_seed"] == 9
        assert read_report(out_b)["master_seed"] == 123

    def test_csv_format_written(self, tmp_path):
        csv_path = tmp_path / "data.csv"
        write_linear_csv(csv_path)
        cfg = tmp_path / "cfg.toml"
        write_config(cfg, csv_path)
        out = tmp_path / "out"
        main(["estimate-plm", "--config", str(cfg), "--out", str(out),
              "--format", "both"])
        assert (out / "metrics.csv").exists()
        assert (out / "report.txt").exists()


class TestEstimateAtet:
    def test_non_binary_treatment_exits_2(self, tmp_path, capsys):
        csv_path = tmp_path / "data.csv"
        write_linear_csv(csv_path, binary_d=False)
        cfg = tmp_path / "cfg.toml"
        write_config(cfg, csv_path)
        assert main(["estimate-atet", "--config", str(cfg),
                     "--out", str(tmp_path / "out")]) == 2
        assert "treatment not binary" in capsys.readouterr().err

    def test_binary_treatment_runs(self, tmp_path):
        csv_path = tmp_path / "data.csv"
        write_linear_csv(csv_path, binary_d=True)
        cfg = tmp_path / "cfg.toml"
        write_config(cfg, csv_path)
        out = tmp_path / "out"
        assert main(["estimate-atet", "--config", str(cfg),
                     "--out", str(out)]) == 0
        report = read_report(out)
        assert "g0" in report["mean_weights"]
        assert np.isfinite(report["aggregate"]["theta_hat"][0])

    def test_stratified_folds_rescue_imbalanced_sample(self):
        # construct a sample/seed where a plain split strands all treated
        # rows in one fold, then confirm stratification fixes it
        rng = np.random.default_rng(0)
        n, k = 12, 4
        x = rng.standard_normal((n, 2))
        d = np.zeros(n)
        d[:3] = 1.0
        y = d + x[:, 0] + rng.standard_normal(n)
        data = Dataset(y=y, d=d, x=x)

        failing_seed = None
        for seed in range(500):
            folds = make_folds(n, k, seed)
            if any(d[folds.complement(j)].max() == 0.0
                   for j in range(1, k + 1)):
                failing_seed = seed
                break
        assert failing_seed is not None

        learners = [LearnerSpec(kind="mean")]
        plain = EstimatorSettings(learners=learners, K=k)
        with pytest.raises(DataError, match="stratif"):
            ddml_atet(data, plain, base_seed=failing_seed)
        stratified = EstimatorSettings(learners=learners, K=k,
                                       stratify_folds=True)
        result = ddml_atet(data, stratified, base_seed=failing_seed)
        assert np.isfinite(result.aggregate.theta_hat[0])


class TestSimulateCommand:
    def write_sim_config(self, path):
        path.write_text("""
master_seed = 3

[simulate]
kind = "toy_linear"
n = 200
reps = 3
K = 2

[[simulate.estimators]]
name = "stack"
mode = "short"
learners = ["ols", "mean"]
""")

    def test_report_schema(self, tmp_path):
        cfg = tmp_path / "sim.toml"
        self.write_sim_config(cfg)
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(cfg),
                     "--out", str(out)]) == 0
        report = read_report(out)
        row = report["estimators"][0]
        assert {"mean_bias", "mab", "coverage"} <= row.keys()
        header = (out / "metrics.csv").read_text().splitlines()[0]
        assert header.startswith("estimator,mean_bias")

    def test_same_seed_byte_identical_csv(self, tmp_path):
        cfg = tmp_path / "sim.toml"
        self.write_sim_config(cfg)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["simulate", "--config", str(cfg), "--out", str(out_a)])
        main(["simulate", "--config", str(cfg), "--out", str(out_b)])
        assert (out_a / "metrics.csv").read_bytes() == \
            (out_b / "metrics.csv").read_bytes()

    def test_missing_simulate_block_exits_2(self, tmp_path):
        cfg = tmp_path / "sim.toml"
        cfg.write_text("master_seed = 1\n")
        assert main(["simulate", "--config", str(cfg),
                     "--out", str(tmp_path / "out")]) == 2


class TestWeightsCommand:
    def test_reprints_tables(self, tmp_path, capsys):
        csv_path = tmp_path / "data.csv"
        write_linear_csv(csv_path)
        cfg = tmp_path / "cfg.toml"
        write_config(cfg, csv_path, extra="")
        cfg.write_text(cfg.read_text().replace('["ols"]', '["ols", "mean"]'))
        out = tmp_path / "out"
        main(["estimate-plm", "--config", str(cfg), "--out", str(out)])
        capsys.readouterr()
        assert main(["weights", str(out / "report.json")]) == 0
        text = capsys.readouterr().out
        assert "ell" in text and "ols" in text and "mean" in text

    def test_missing_report_exits_2(self, tmp_path):
        assert main(["weights", str(tmp_path / "nope.json")]) == 2


class TestReportClosure:
    def test_report_embeds_resolved_config_and_seed(self, tmp_path):
        csv_path = tmp_path / "data.csv"
        write_linear_csv(csv_path)
        cfg = tmp_path / "cfg.toml"
        write_config(cfg, csv_path)
        out = tmp_path / "out"
        main(["estimate-plm", "--config", str(cfg), "--out", str(out)])
        report = read_report(out)
        assert report["master_seed"] == 9
        assert report["config"]["K"] == 2
        assert report["config"]["mode"] == "short"
        assert report["config"]["learners"][0]["kind"] == "ols"
        assert report["data"]["n"] == 200
