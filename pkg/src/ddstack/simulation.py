"""DGP generators and Monte Carlo drivers.

Two toy partially-linear DGPs (linear and nonlinear nuisance over Toeplitz-
correlated covariates), a calibrated generator fitted to a real dataset
(partial out the OLS slope, fit generative models for outcome residuals and
treatment, then simulate over bootstrapped covariate rows), and a driver
that runs a list of estimator configurations over replications and reports
bias, median absolute bias, coverage, weights, and MSPEs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from .core_data import Dataset
from .crossfit import cross_fit, make_folds
from .errors import ConfigurationError
from .estimators import NuisanceEstimates, plm_estimate
from .learners import LearnerSpec, make_spec
from .stacking import stack

TOY_DIMENSION = 13
TOY_RHO = 0.5
TOY_THETA0 = 0.5

#: calibrated-simulation defaults; noise scales are standard deviations
CALIBRATED_THETA0 = 6_000.0
KAPPA1_DEFAULT = 0.35
KAPPA2_BY_ENGINE = {"linear": 55_500.0, "gradient_boosting": 54_000.0}


def toeplitz_cov(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def g_linear(x: np.ndarray) -> np.ndarray:
    """Geometrically decaying linear nuisance: sum_j 0.9^j x_j (j from 1)."""
    coef = 0.9 ** np.arange(1, x.shape[1] + 1)
    return x @ coef


def g_nonlinear(x: np.ndarray, literal_fifth: bool = False) -> np.ndarray:
    """Nonlinear nuisance with interactions and squares over 13 covariates.

    The printed term list contains a repeated-index product and a stray
    factor; the default reading uses x4*x5 and x11^2. ``literal_fifth``
    switches the repeated-index term to x5*x5 instead of x4*x5.
    """
    if x.shape[1] < 13:
        raise ConfigurationError("nonlinear nuisance needs at least 13 covariates")
    c = {j: x[:, j - 1] for j in range(1, 14)}
    fifth = c[5] * c[5] if literal_fifth else c[4] * c[5]
    return (c[1] * c[2] + c[3] ** 2 + fifth + c[6] * c[7] + c[8] * c[9]
            + c[10] + c[11] ** 2 + c[12] * c[13])


@dataclass
class DgpSpec:
    """A data-generating process: toy (linear/nonlinear) or calibrated."""

    kind: str
    n: int = 1000
    theta0: float = TOY_THETA0
    p: int = TOY_DIMENSION
    rho: float = TOY_RHO
    c_y: Optional[float] = None
    c_d: Optional[float] = None
    seed: int = 0
    literal_fifth: bool = False
    # calibrated-DGP state
    g_model: Optional[Callable] = None
    h_model: Optional[Callable] = None
    x_source: Optional[np.ndarray] = None
    kappa1: float = KAPPA1_DEFAULT
    kappa2: Optional[float] = None
    engine: Optional[str] = None
    theta_ols: Optional[float] = None

    def g(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "toy_linear":
            return g_linear(x)
        if self.kind == "toy_nonlinear":
            return g_nonlinear(x, self.literal_fifth)
        raise ConfigurationError(f"no closed-form nuisance for kind {self.kind!r}")

    def ell_truth(self, x: np.ndarray) -> np.ndarray:
        """E[Y | X] for the toy DGPs."""
        return (self.theta0 * self.c_d + self.c_y) * self.g(x)

    def m_truth(self, x: np.ndarray) -> np.ndarray:
        """E[D | X] for the toy DGPs."""
        return self.c_d * self.g(x)


def calibrate_toy_scale(kind: str, theta0: float = TOY_THETA0,
                        p: int = TOY_DIMENSION, rho: float = TOY_RHO,
                        seed: int = 0, literal_fifth: bool = False,
                        target_r2: float = 0.5, draws: int = 50_000) -> float:
    """Common scale c = c_Y = c_D so the share of Var(Y) explained by the
    covariates is target_r2, solved by bisection on a pre-simulation."""
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(toeplitz_cov(p, rho))
    x = rng.standard_normal((draws, p)) @ chol.T
    g = g_linear(x) if kind == "toy_linear" else g_nonlinear(x, literal_fifth)
    var_g = float(g.var())
    noise = theta0 ** 2 + 1.0  # Var(theta0*u + eps), both standard normal

    def r2(c):
        explained = (c * (1.0 + theta0)) ** 2 * var_g
        return explained / (explained + noise)

    lo, hi = 0.0, 1.0
    while r2(hi) < target_r2:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if r2(mid) < target_r2:
            lo = mid
        else:
            hi = mid
        if abs(r2(mid) - target_r2) < 5e-4:
            break
    return 0.5 * (lo + hi)


def toy_spec(kind: str, n: int = 1000, theta0: float = TOY_THETA0,
             p: int = TOY_DIMENSION, rho: float = TOY_RHO, seed: int = 0,
             c_y: Optional[float] = None, c_d: Optional[float] = None,
             literal_fifth: bool = False) -> DgpSpec:
    """Toy DGP spec with scaling constants calibrated unless supplied."""
    if kind not in ("toy_linear", "toy_nonlinear"):
        raise ConfigurationError(f"unknown toy kind: {kind!r}")
    if c_y is None or c_d is None:
        c = calibrate_toy_scale(kind, theta0, p, rho, seed=seed,
                                literal_fifth=literal_fifth)
        c_y = c if c_y is None else c_y
        c_d = c if c_d is None else c_d
    return DgpSpec(kind=kind, n=n, theta0=theta0, p=p, rho=rho,
                   c_y=c_y, c_d=c_d, seed=seed, literal_fifth=literal_fifth)


def generate_toy(spec: DgpSpec, seed: Optional[int] = None) -> Dataset:
    """Draw one toy sample: Y = theta0*D + c_Y*g(X) + eps, D = c_D*g(X) + u."""
    if spec.kind not in ("toy_linear", "toy_nonlinear"):
        raise ConfigurationError(f"not a toy spec: {spec.kind!r}")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    chol = np.linalg.cholesky(toeplitz_cov(spec.p, spec.rho))
    x = rng.standard_normal((spec.n, spec.p)) @ chol.T
    g = spec.g(x)
    u = rng.standard_normal(spec.n)
    eps = rng.standard_normal(spec.n)
    d = spec.c_d * g + u
    y = spec.theta0 * d + spec.c_y * g + eps
    return Dataset(y=y, d=d, x=x)


def calibrate_generative(dataset: Dataset, engine: str = "linear",
                         theta0: float = CALIBRATED_THETA0,
                         kappa1: float = KAPPA1_DEFAULT,
                         kappa2: Optional[float] = None,
                         seed: int = 0) -> DgpSpec:
    """Fit the calibrated generative models on a real dataset.

    Steps: full-sample OLS slope of the binary treatment, partial residuals
    of the outcome, then one generative model for the residuals and one for
    the treatment, each either linear or gradient-boosted.
    """
    if engine not in KAPPA2_BY_ENGINE:
        raise ConfigurationError(f"unknown calibration engine: {engine!r}")
    if dataset.q != 1 or not dataset.treatment_is_binary[0]:
        raise ConfigurationError("calibration requires a single binary treatment")
    from .learners import fit as fit_learner, predict as predict_learner

    d = dataset.d[:, 0]
    design = np.column_stack([np.ones(dataset.n), d, dataset.x])
    coef, _, _, _ = np.linalg.lstsq(design, dataset.y, rcond=None)
    theta_ols = float(coef[1])
    partial_resid = dataset.y - theta_ols * d

    if engine == "linear":
        spec_g = LearnerSpec(kind="ols", name="calibration_g", seed_stream=seed)
        spec_h = LearnerSpec(kind="ols", name="calibration_h",
                             seed_stream=seed + 1)
    else:
        hyper = {"n_trees": 500, "max_depth": 3, "learning_rate": 0.01}
        spec_g = LearnerSpec(kind="gradient_boosting", hyperparameters=hyper,
                             name="calibration_g", seed_stream=seed)
        spec_h = LearnerSpec(kind="gradient_boosting", hyperparameters=hyper,
                             name="calibration_h", seed_stream=seed + 1)
    g_fit = fit_learner(spec_g, dataset.x, partial_resid)
    h_fit = fit_learner(spec_h, dataset.x, d)
    return DgpSpec(
        kind="calibrated", n=dataset.n, theta0=theta0,
        p=dataset.p, seed=seed,
        g_model=lambda x: predict_learner(g_fit, x),
        h_model=lambda x: predict_learner(h_fit, x),
        x_source=dataset.x.copy(),
        kappa1=kappa1,
        kappa2=KAPPA2_BY_ENGINE[engine] if kappa2 is None else kappa2,
        engine=engine, theta_ols=theta_ols,
    )


def generate_calibrated(spec: DgpSpec, n_b: int,
                        seed: Optional[int] = None) -> Dataset:
    """Bootstrap covariate rows and simulate treatment and outcome.

    Treatment is the indicator 1{h(x) + nu >= 0.5} with nu ~ N(0, kappa1);
    the outcome is theta0 * d + g(x) + eps with eps ~ N(0, kappa2). The
    noise scales are standard deviations.
    """
    if spec.kind != "calibrated":
        raise ConfigurationError("spec was not produced by calibrate_generative")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    rows = rng.integers(0, spec.x_source.shape[0], size=n_b)
    x = spec.x_source[rows]
    nu = rng.normal(0.0, spec.kappa1, size=n_b)
    eps = rng.normal(0.0, spec.kappa2, size=n_b)
    d = (spec.h_model(x) + nu >= 0.5).astype(float)
    y = spec.theta0 * d + spec.g_model(x) + eps
    return Dataset(y=y, d=d, x=x)


def generate(spec: DgpSpec, seed: Optional[int] = None,
             n_b: Optional[int] = None) -> Dataset:
    if spec.kind == "calibrated":
        return generate_calibrated(spec, n_b or spec.n, seed)
    return generate_toy(spec, seed)


# ---------------------------------------------------------------------------
# Monte Carlo driver
# ---------------------------------------------------------------------------

@dataclass
class EstimatorConfig:
    """One estimator arm of a Monte Carlo run.

    ``mode`` is a stacking mode or "single" (DDML with one candidate
    learner, named by ``learners[0]``). Learner entries named "oracle" are
    bound to the DGP's true conditional expectations per nuisance target.
    """

    name: str
    learners: list
    mode: str = "short"
    final: str = "cls"

    def __post_init__(self):
        if self.mode not in ("short", "conventional", "pooled", "single"):
            raise ConfigurationError(f"unknown estimator mode: {self.mode!r}")
        if self.mode == "single" and len(self.learners) != 1:
            raise ConfigurationError("single mode takes exactly one learner")

    @property
    def needs_nested(self) -> bool:
        return self.mode in ("conventional", "pooled")


@dataclass
class SimulationReport:
    """Per-estimator Monte Carlo metrics plus weight and MSPE summaries."""

    rows: list[dict]
    reps: int
    reference: float
    dgp_kind: str
    base_seed: int
    runtimes: dict[str, float] = field(default_factory=dict)

    def row(self, name: str) -> dict:
        for row in self.rows:
            if row["estimator"] == name:
                return row
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "dgp_kind": self.dgp_kind,
            "replications": self.reps,
            "reference": self.reference,
            "base_seed": self.base_seed,
            "estimators": self.rows,
            "timings": self.runtimes,
        }

    def csv_rows(self) -> list[dict]:
        keys = ["estimator", "mean_bias", "se_bias", "mab", "coverage",
                "failures"]
        return [{k: row[k] for k in keys} for row in self.rows]


def _bind_oracles(entries: Sequence, dgp: DgpSpec, target: str,
                  seed: int) -> list[LearnerSpec]:
    truth = dgp.ell_truth if target == "ell" else dgp.m_truth
    specs = []
    for entry in entries:
        if isinstance(entry, str) and entry == "oracle":
            specs.append(LearnerSpec(kind="oracle", name="oracle",
                                     hyperparameters={"truth": truth}))
        else:
            specs.append(make_spec(entry, seed_stream=seed))
    return specs


def _learner_names(entries: Sequence) -> list[str]:
    names = []
    for entry in entries:
        if isinstance(entry, LearnerSpec):
            names.append(entry.name)
        elif isinstance(entry, str):
            names.append(entry)
        else:
            names.append(entry.get("name", entry.get("kind")))
    return names


def _one_replication(dgp, configs, union_entries, need_nested, K, V, n_b,
                     rep_seed):
    data = generate(dgp, seed=rep_seed, n_b=n_b)
    folds = make_folds(data.n, K, rep_seed)
    cfms = {}
    for target in ("ell", "m:0"):
        specs = _bind_oracles(union_entries, dgp, target, rep_seed)
        cfms[target] = cross_fit(data, target, specs, folds,
                                 with_nested=need_nested, V=V)
    out = {}
    for config in configs:
        names = _learner_names(config.learners)
        started = time.perf_counter()
        try:
            nuisances = {}
            weights = {}
            for target in ("ell", "m:0"):
                sub = cfms[target].select_learners(names)
                if config.mode == "single":
                    nuisances[target] = sub.preds[:, 0]
                    weights[target] = np.ones(1)
                else:
                    sw, yhat = stack(config.mode, sub, final=config.final)
                    nuisances[target] = yhat
                    weights[target] = sw.mean_weights()
            est = plm_estimate(data.y, data.d,
                               NuisanceEstimates(ell_hat=nuisances["ell"],
                                                 m_hat=nuisances["m:0"]))
            out[config.name] = {
                "theta": float(est.theta_hat[0]),
                "se": float(est.se[0]),
                "ci": (float(est.ci_low[0]), float(est.ci_high[0])),
                "weights": {t: w.tolist() for t, w in weights.items()},
                "mspe": {t: cfms[t].select_learners(names).mspe.tolist()
                         for t in ("ell", "m:0")},
                "elapsed": time.perf_counter() - started,
            }
        except Exception as exc:
            out[config.name] = {"error": f"{type(exc).__name__}: {exc}",
                                "elapsed": time.perf_counter() - started}
    return out


def run_monte_carlo(dgp: DgpSpec, estimators: Sequence[EstimatorConfig],
                    reps: int, base_seed: int = 0, K: int = 2, V: int = 5,
                    n_b: Optional[int] = None, reference: Optional[float] = None,
                    threads: int = 1) -> SimulationReport:
    """Run every estimator configuration over ``reps`` simulated samples.

    Candidate cross-fit matrices are computed once per replication for the
    union of learners and shared across configurations. Bias is measured
    against theta0 unless an explicit full-sample ``reference`` is given.
    Estimator failures are recorded per replication and excluded from the
    metrics, with the failure count reported.
    """
    if reps < 1:
        raise ConfigurationError("need reps >= 1")
    estimators = list(estimators)
    ref = dgp.theta0 if reference is None else float(reference)

    union_entries: list = []
    seen = set()
    for config in estimators:
        for entry, name in zip(config.learners, _learner_names(config.learners)):
            if name not in seen:
                union_entries.append(entry)
                seen.add(name)
    need_nested = any(c.needs_nested for c in estimators)

    rep_seeds = [base_seed + r for r in range(reps)]
    if threads > 1:
        rep_results = Parallel(n_jobs=threads)(
            delayed(_one_replication)(dgp, estimators, union_entries,
                                      need_nested, K, V, n_b, seed)
            for seed in rep_seeds)
    else:
        rep_results = [_one_replication(dgp, estimators, union_entries,
                                        need_nested, K, V, n_b, seed)
                       for seed in rep_seeds]

    rows = []
    runtimes = {}
    for config in estimators:
        names = _learner_names(config.learners)
        per = [r[config.name] for r in rep_results]
        ok = [p for p in per if "error" not in p]
        failures = len(per) - len(ok)
        biases = np.array([p["theta"] - ref for p in ok])
        covered = np.array([p["ci"][0] <= ref <= p["ci"][1] for p in ok])
        mean_weights = {
            t: np.mean([p["weights"][t] for p in ok], axis=0).tolist()
            for t in ("ell", "m:0")} if ok else {}
        mean_mspe = {
            t: np.mean([p["mspe"][t] for p in ok], axis=0).tolist()
            for t in ("ell", "m:0")} if ok else {}
        runtimes[config.name] = float(sum(p["elapsed"] for p in per))
        rows.append({
            "estimator": config.name,
            "mode": config.mode,
            "final": config.final,
            "learners": names,
            "mean_bias": float(biases.mean()) if len(biases) else float("nan"),
            "se_bias": float(biases.std(ddof=1) / np.sqrt(len(biases)))
            if len(biases) > 1 else float("nan"),
            "mab": float(np.median(np.abs(biases))) if len(biases) else float("nan"),
            "coverage": float(covered.mean()) if len(covered) else float("nan"),
            "failures": failures,
            "mean_weights": mean_weights,
            "mean_mspe": mean_mspe,
        })
    return SimulationReport(rows=rows, reps=reps, reference=ref,
                            dgp_kind=dgp.kind, base_seed=base_seed,
                            runtimes=runtimes)
