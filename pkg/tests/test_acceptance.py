"""Acceptance suite: one test per release criterion, each printing a
single PASS/FAIL line. Timed criteria assert their wall-clock budgets."""

import json
import os
import time

import numpy as np
import pytest
from scipy.special import expit

from ddstack import (Dataset, EstimatorConfig, EstimatorSettings,
                     LearnerSpec, NuisanceEstimates, atet_estimate, cls_solve,
                     cross_fit, ddml_plm, make_folds, run_monte_carlo,
                     stack, stack_conventional, stack_short, toy_spec)
from ddstack.cli import main
from ddstack.simulation import generate
from gridtools import grid_oracle, kkt_residual


def report(num, desc, ok):
    print(f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {desc}")
    assert ok, f"criterion {num}: {desc}"


def test_criterion_01_cls_solver_vs_grid_oracle():
    rng = np.random.default_rng(12345)
    start = time.perf_counter()
    worst_gap, worst_kkt = 0.0, 0.0
    for i in range(500):
        J = (2, 3, 4)[i % 3]
        P = rng.standard_normal((50, J))
        y = rng.standard_normal(50)
        w = cls_solve(P, y)
        obj = float((y - P @ w) @ (y - P @ w))
        oracle = grid_oracle(P, y, steps=1000)
        worst_gap = max(worst_gap, obj - oracle - 1e-6 * (1 + abs(oracle)))
        # KKT residual on the mean-squared objective (the solver's scale)
        worst_kkt = max(worst_kkt, kkt_residual(P, y, w) / 50.0)
    elapsed = time.perf_counter() - start
    report(1, f"CLS within grid-oracle tolerance on 500 instances "
              f"(worst gap {worst_gap:.2e}, worst KKT {worst_kkt:.2e}, "
              f"{elapsed:.1f}s < 30s)",
           worst_gap <= 0.0 and worst_kkt < 1e-6 and elapsed < 30.0)


def test_criterion_02_oracle_plm_coverage():
    start = time.perf_counter()
    dgp = toy_spec("toy_linear", n=1000, seed=7)
    rep = run_monte_carlo(
        dgp, [EstimatorConfig(name="oracle", learners=["oracle"],
                              mode="single")],
        reps=200, base_seed=7, K=2)
    row = rep.row("oracle")
    elapsed = time.perf_counter() - start
    ok = (0.90 <= row["coverage"] <= 0.98
          and abs(row["mean_bias"]) < 3 * row["se_bias"]
          and elapsed < 120.0)
    report(2, f"oracle-nuisance PLM: coverage {row['coverage']:.3f} in "
              f"[0.90, 0.98], |bias| {abs(row['mean_bias']):.4f} < "
              f"3*SE {3 * row['se_bias']:.4f}, {elapsed:.0f}s < 120s", ok)


def test_criterion_03_two_regime_bias_ordering():
    start = time.perf_counter()
    configs = [
        EstimatorConfig(name="stack", learners=["lasso_cv_poly2", "gbt_low"],
                        mode="short", final="cls"),
        EstimatorConfig(name="lasso", learners=["lasso_cv_poly2"],
                        mode="single"),
        EstimatorConfig(name="gbt", learners=["gbt_low"], mode="single"),
    ]
    bias = {}
    for kind, base_seed in (("toy_nonlinear", 100), ("toy_linear", 219)):
        rep = run_monte_carlo(toy_spec(kind, n=1000, seed=100), configs,
                              reps=100, base_seed=base_seed, K=2)
        bias[kind] = {name: abs(rep.row(name)["mean_bias"])
                      for name in ("stack", "lasso", "gbt")}
    elapsed = time.perf_counter() - start
    nl, ln = bias["toy_nonlinear"], bias["toy_linear"]
    # The poly2 lasso spans the nonlinear truth, so the stack can only tie
    # it (corner weights in every replication) or lose by the leakage onto
    # the biased GBT; the strict ordering below is kept deliberately even
    # though it is a knife edge at this scale.
    ok_nl = nl["stack"] <= nl["lasso"] and nl["stack"] <= 1.5 * nl["gbt"]
    ok_ln = ln["stack"] <= ln["gbt"] and ln["stack"] <= 1.5 * ln["lasso"]
    report(3, f"stacking tracks the better learner: nonlinear "
              f"|bias| stack {nl['stack']:.4f} vs lasso {nl['lasso']:.4f}, "
              f"gbt {nl['gbt']:.4f}; linear stack {ln['stack']:.4f} vs "
              f"gbt {ln['gbt']:.4f}, lasso {ln['lasso']:.4f}; "
              f"{elapsed:.0f}s < 1200s",
           ok_nl and ok_ln and elapsed < 1200.0)


def test_criterion_04_weight_adaptation():
    start = time.perf_counter()
    linear = run_monte_carlo(
        toy_spec("toy_linear", n=2000, seed=200),
        [EstimatorConfig(name="s", learners=["ols", "rf_low"], mode="short",
                         final="cls")],
        reps=50, base_seed=200, K=2)
    w_ols = linear.row("s")["mean_weights"]["ell"][0]
    nonlinear = run_monte_carlo(
        toy_spec("toy_nonlinear", n=2000, seed=200),
        [EstimatorConfig(name="s", learners=["ols", "gbt_low"], mode="short",
                         final="cls")],
        reps=50, base_seed=200, K=2)
    w_gbt = nonlinear.row("s")["mean_weights"]["ell"][1]
    elapsed = time.perf_counter() - start
    report(4, f"CLS weights adapt: linear mean OLS weight {w_ols:.3f} > 0.5, "
              f"nonlinear mean GBT weight {w_gbt:.3f} > 0.5, "
              f"{elapsed:.0f}s < 900s",
           w_ols > 0.5 and w_gbt > 0.5 and elapsed < 900.0)


def test_criterion_05_cost_structure():
    dgp = toy_spec("toy_linear", n=2000, seed=300)
    data = generate(dgp, seed=300)
    learners = [
        LearnerSpec(kind="ols", name="ols"),
        LearnerSpec(kind="lasso_cv", name="lasso",
                    hyperparameters={"alphas": [0.01]}),
        LearnerSpec(kind="ridge_cv", name="ridge",
                    hyperparameters={"alphas": [1.0]}),
        LearnerSpec(kind="random_forest", name="rf",
                    hyperparameters={"n_trees": 10}),
        LearnerSpec(kind="gradient_boosting", name="gbt",
                    hyperparameters={"n_trees": 50, "learning_rate": 0.1}),
    ]
    folds = make_folds(data.n, 5, seed=300)

    t0 = time.perf_counter()
    cfm_short = cross_fit(data, "ell", learners, folds, with_nested=False)
    stack_short(cfm_short)
    t_short = time.perf_counter() - t0

    t0 = time.perf_counter()
    cfm_conv = cross_fit(data, "ell", learners, folds, with_nested=True, V=5)
    stack_conventional(cfm_conv)
    t_conv = time.perf_counter() - t0

    ok = (cfm_short.n_fits == 5 * 5
          and cfm_conv.n_fits == 5 * 5 * 5 + 5 * 5
          and t_short < 0.5 * t_conv)
    report(5, f"cost structure: {cfm_short.n_fits} fits (short) vs "
              f"{cfm_conv.n_fits} (conventional), wall {t_short:.2f}s vs "
              f"{t_conv:.2f}s", ok)


def test_criterion_06_variant_equivalences():
    rng = np.random.default_rng(400)
    n = 150
    x = rng.standard_normal((n, 3))
    y = x[:, 0] + 0.1 * rng.standard_normal(n)
    data = Dataset(y=y, d=np.zeros(n), x=x)
    folds = make_folds(n, 3, seed=400)
    learners = [LearnerSpec(kind="ols", name="ols"),
                LearnerSpec(kind="ols", name="ols_dup")]
    cfm = cross_fit(data, "ell", learners, folds, with_nested=True, V=3)

    single = cfm.select_learners(["ols"])
    plain = single.preds[:, 0]
    exact = all(np.array_equal(stack(mode, single)[1], plain)
                for mode in ("conventional", "short", "pooled"))

    _, yhat_dup = stack("short", cfm)
    dup_gap = float(np.abs(yhat_dup - plain).max())
    report(6, f"J=1 modes identical to plain cross-fit (exact), duplicated "
              f"learners prediction gap {dup_gap:.1e} < 1e-10",
           exact and dup_gap < 1e-10)


def test_criterion_07_atet_hand_oracle_and_coverage():
    est = atet_estimate(
        np.array([3.0, 5.0, 1.0, 1.0]), np.array([1.0, 1.0, 0.0, 0.0]),
        NuisanceEstimates(g0_hat=np.ones(4), m_hat=np.full(4, 0.5),
                          p_hat=0.5))
    hand_ok = est.theta_hat[0] == 3.0

    # confounded DGP with known homogeneous effect and oracle nuisances
    theta0, n, reps = 2.0, 800, 200
    covered = 0
    for r in range(reps):
        rng = np.random.default_rng(500 + r)
        x = rng.standard_normal((n, 3))
        m = expit(x[:, 0])
        d = (rng.random(n) < m).astype(float)
        g = x[:, 0] + 0.5 * x[:, 1]
        y = theta0 * d + g + rng.standard_normal(n)
        rep_est = atet_estimate(y, d, NuisanceEstimates(
            g0_hat=g, m_hat=m, p_hat=0.5))  # E[expit(X1)] = 0.5 by symmetry
        covered += int(rep_est.ci_low[0] <= theta0 <= rep_est.ci_high[0])
    coverage = covered / reps
    report(7, f"ATET: hand example theta = 3 exactly ({hand_ok}), oracle "
              f"coverage {coverage:.3f} in [0.90, 0.98]",
           hand_ok and 0.90 <= coverage <= 0.98)


def test_criterion_08_aggregation_contract():
    rng = np.random.default_rng(600)
    n = 300
    x = rng.standard_normal((n, 3))
    d = x[:, 0] + rng.standard_normal(n)
    y = 1.2 * d + x[:, 1] + rng.standard_normal(n)
    data = Dataset(y=y, d=d, x=x)
    settings = EstimatorSettings(learners=[LearnerSpec(kind="ols")],
                                 mode="short", K=2, R=5,
                                 aggregation="median")
    result = ddml_plm(data, settings, base_seed=600)
    per_rep = np.array([e.theta_hat[0]
                        for e in result.repetition_set.estimates])
    agg = result.aggregate
    median_ok = agg.theta_hat[0] == np.median(per_rep)
    se_ok = agg.se[0] >= min(e.se[0]
                             for e in result.repetition_set.estimates)
    report(8, f"R=5 aggregate equals elementwise median (exact) and "
              f"se_agg {agg.se[0]:.4f} >= min rep se", median_ok and se_ok)


def _strip_timings(path):
    payload = json.loads(path.read_text())
    payload.pop("timings", None)
    return json.dumps(payload, sort_keys=True)


def test_criterion_09_thread_count_determinism(tmp_path):
    rng = np.random.default_rng(700)
    n = 120
    x = rng.standard_normal((n, 3))
    d = x[:, 0] + rng.standard_normal(n)
    y = 1.5 * d + x[:, 1] + rng.standard_normal(n)
    csv_path = tmp_path / "data.csv"
    rows = [f"{y[i]},{d[i]},{x[i, 0]},{x[i, 1]},{x[i, 2]}" for i in range(n)]
    csv_path.write_text("y,d,x1,x2,x3\n" + "\n".join(rows) + "\n")
    est_cfg = tmp_path / "est.toml"
    est_cfg.write_text(f"""
master_seed = 11
[data]
path = "{csv_path}"
outcome = "y"
treatments = ["d"]
[estimator]
mode = "short"
K = 3
R = 2
learners = ["ols", "mean"]
""")
    sim_cfg = tmp_path / "sim.toml"
    sim_cfg.write_text("""
master_seed = 12
[simulate]
kind = "toy_linear"
n = 150
reps = 4
K = 2
[[simulate.estimators]]
name = "stack"
mode = "short"
learners = ["ols", "mean"]
""")
    ok = True
    for cmd, cfg in (("estimate-plm", est_cfg), ("simulate", sim_cfg)):
        outs = []
        for threads in (1, 2):
            out = tmp_path / f"{cmd}-t{threads}"
            assert main([cmd, "--config", str(cfg), "--threads",
                         str(threads), "--out", str(out)]) == 0
            outs.append(_strip_timings(out / "report.json"))
        ok = ok and outs[0] == outs[1]
    report(9, "reports byte-identical across --threads values "
              "(timing fields excluded)", ok)


def test_criterion_10_full_scale_401k():
    path = os.environ.get("DDSTACK_401K_CSV")
    if not path:
        print("\nACCEPTANCE 10: SKIP - full-scale 401(k) results need the "
              "SIPP extract; set DDSTACK_401K_CSV to run the full-sample "
              "OLS check")
        pytest.skip("401(k) extract not supplied")
    from ddstack import load_csv
    data = load_csv(path, outcome="net_tfa", treatments=["e401"])
    design = np.column_stack([np.ones(data.n), data.d, data.x])
    coef, _, _, _ = np.linalg.lstsq(design, data.y, rcond=None)
    theta_ols = float(coef[1])
    report(10, f"full-sample 401(k) OLS slope {theta_ols:.1f} within "
               f"5896 +/- 1", abs(theta_ols - 5896.0) <= 1.0)
