"""Candidate-learner zoo behind a uniform fit/predict interface.

Kinds: ols, ridge_cv, lasso_cv, random_forest, gradient_boosting, logistic,
mean (constant predictor), and oracle (returns a known conditional
expectation, for testing estimator consistency).

Tree ensembles and the coordinate-descent lasso path are backed by
scikit-learn; penalty selection for the *_cv kinds uses an internal 5-fold
split drawn from the learner's own seed stream, independent of any outer
fold structure. All fits are deterministic given (spec, data, seed_stream).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from sklearn.ensemble import (HistGradientBoostingRegressor,
                              RandomForestRegressor)
from sklearn.linear_model import Lasso, LogisticRegression
from sklearn.model_selection import KFold

from .core_data import TransformPlan, apply_transform, fit_transform
from .errors import ConfigurationError

LEARNER_KINDS = {"ols", "ridge_cv", "lasso_cv", "random_forest",
                 "gradient_boosting", "logistic", "mean", "oracle"}

#: probability clip for logistic predictions
PROB_EPS = 1e-6

#: internal cross-validation folds for *_cv kinds
CV_FOLDS = 5

#: log-spaced penalty grid: 50 points from lambda_max down to 1e-4*lambda_max
GRID_POINTS = 50
GRID_EPS = 1e-4


@dataclass
class LearnerSpec:
    """Declarative description of a candidate learner."""

    kind: str
    hyperparameters: dict = field(default_factory=dict)
    transform: Optional[list] = None
    name: str = ""
    seed_stream: int = 0

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ConfigurationError(f"unknown learner kind: {self.kind!r}")
        if not self.name:
            self.name = self.kind

    def with_seed(self, seed: int) -> "LearnerSpec":
        return replace(self, seed_stream=int(seed))


@dataclass
class FittedLearner:
    """A fitted learner; ``predict`` is side-effect free and total on finite inputs."""

    spec: LearnerSpec
    model: object
    plan: Optional[TransformPlan]
    diagnostics: dict = field(default_factory=dict)
    input_columns: int = 0


def _lambda_max(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    lam = float(np.abs(xc.T @ yc).max() / len(y))
    return lam if lam > 0 else 1.0


def _penalty_grid(x, y, span_up: float = 1.0) -> np.ndarray:
    lam = _lambda_max(x, y)
    return np.geomspace(lam * span_up, lam * span_up * GRID_EPS, GRID_POINTS)


def _cv_splitter(n: int, seed: int) -> KFold:
    return KFold(n_splits=min(CV_FOLDS, n), shuffle=True,
                 random_state=seed % (2 ** 32))


def _lasso_path_fit(x, y, alphas, tol, max_iter) -> Lasso:
    """Warm-start cyclic coordinate descent down a descending penalty grid."""
    model = Lasso(alpha=alphas[0], tol=tol, max_iter=max_iter, warm_start=True)
    for alpha in alphas:
        model.set_params(alpha=alpha)
        model.fit(x, y)
    return model


def _lasso_cv_select(x, y, alphas, seed, tol, max_iter) -> tuple[float, Lasso]:
    """Penalty minimizing 5-fold CV MSE along the warm-started lasso path."""
    order = np.argsort(alphas)[::-1]
    alphas = np.asarray(alphas, dtype=float)[order]
    errors = np.zeros(len(alphas))
    for train, test in _cv_splitter(len(y), seed).split(x):
        model = Lasso(alpha=alphas[0], tol=tol, max_iter=max_iter,
                      warm_start=True)
        for a_idx, alpha in enumerate(alphas):
            model.set_params(alpha=alpha)
            model.fit(x[train], y[train])
            resid = y[test] - model.predict(x[test])
            errors[a_idx] += float(resid @ resid)
    best = int(np.argmin(errors))
    model = _lasso_path_fit(x, y, alphas[:best + 1], tol, max_iter)
    return float(alphas[best]), model


class _RidgeModel:
    """Closed-form ridge on centered data: min ||y - Xb||^2 + alpha ||b||^2."""

    def __init__(self, x, y, alpha):
        self.x_mean = x.mean(axis=0)
        self.y_mean = y.mean()
        u, s, vt = np.linalg.svd(x - self.x_mean, full_matrices=False)
        uty = u.T @ (y - self.y_mean)
        self.coef = vt.T @ (s / (s ** 2 + alpha) * uty)
        self.alpha = float(alpha)

    def predict(self, x):
        return self.y_mean + (x - self.x_mean) @ self.coef


def _ridge_cv_select(x, y, alphas, seed) -> tuple[float, _RidgeModel]:
    """Penalty minimizing 5-fold CV MSE; one SVD per fold covers the grid."""
    alphas = np.asarray(alphas, dtype=float)
    errors = np.zeros(len(alphas))
    for train, test in _cv_splitter(len(y), seed).split(x):
        x_mean = x[train].mean(axis=0)
        y_mean = y[train].mean()
        u, s, vt = np.linalg.svd(x[train] - x_mean, full_matrices=False)
        uty = u.T @ (y[train] - y_mean)
        xt = (x[test] - x_mean) @ vt.T
        for a_idx, alpha in enumerate(alphas):
            pred = y_mean + xt @ (s / (s ** 2 + alpha) * uty)
            resid = y[test] - pred
            errors[a_idx] += float(resid @ resid)
    best = int(np.argmin(errors))
    return float(alphas[best]), _RidgeModel(x, y, alphas[best])


class _ConstantModel:
    def __init__(self, value: float):
        self.value = float(value)

    def predict(self, x):
        return np.full(x.shape[0], self.value)


class _OlsModel:
    """Least squares with intercept; minimum-norm solution on rank deficiency."""

    def __init__(self, x, y):
        design = np.column_stack([np.ones(x.shape[0]), x])
        coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        self.coef = coef
        self.rank_deficient = rank < design.shape[1]

    def predict(self, x):
        return self.coef[0] + x @ self.coef[1:]


class _OracleModel:
    def __init__(self, truth: Callable):
        self.truth = truth

    def predict(self, x):
        return np.asarray(self.truth(x), dtype=float).ravel()


class _LogisticModel:
    def __init__(self, model):
        self.model = model

    def predict(self, x):
        prob = self.model.predict_proba(x)[:, 1]
        return np.clip(prob, PROB_EPS, 1.0 - PROB_EPS)


def fit(spec: LearnerSpec, x: np.ndarray, y: np.ndarray) -> FittedLearner:
    """Fit a learner spec on (x, y).

    The spec's transform (if any) is fitted on the same training rows and
    frozen into the returned learner. An all-constant target short-circuits
    every kind into the constant predictor.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != len(y) or len(y) < 2:
        raise ConfigurationError("fit needs rows(x) == len(y) >= 2")
    input_columns = x.shape[1]

    plan = None
    if spec.transform:
        plan = fit_transform(spec.transform, x)
        x = apply_transform(plan, x)

    seed = int(spec.seed_stream) % (2 ** 32)
    diagnostics: dict = {}

    if spec.kind == "oracle":
        model = _OracleModel(spec.hyperparameters["truth"])
    elif np.ptp(y) == 0.0 or spec.kind == "mean":
        model = _ConstantModel(y.mean())
    elif spec.kind == "ols":
        model = _OlsModel(x, y)
        diagnostics["rank_deficient"] = model.rank_deficient
    elif spec.kind == "lasso_cv":
        alphas = spec.hyperparameters.get("alphas")
        alphas = np.asarray(alphas, dtype=float) if alphas is not None \
            else _penalty_grid(x, y)
        tol = spec.hyperparameters.get("tol", 1e-4)
        max_iter = spec.hyperparameters.get("max_iter", 10_000)
        if len(alphas) == 1:
            model = Lasso(alpha=alphas[0], tol=tol, max_iter=max_iter)
            model.fit(x, y)
            diagnostics["penalty"] = float(alphas[0])
        else:
            diagnostics["penalty"], model = _lasso_cv_select(
                x, y, alphas, seed, tol, max_iter)
    elif spec.kind == "ridge_cv":
        alphas = spec.hyperparameters.get("alphas")
        alphas = np.asarray(alphas, dtype=float) if alphas is not None \
            else _penalty_grid(x, y, span_up=100.0) * len(y)
        if len(alphas) == 1:
            model = _RidgeModel(x, y, alphas[0])
            diagnostics["penalty"] = float(alphas[0])
        else:
            diagnostics["penalty"], model = _ridge_cv_select(x, y, alphas, seed)
    elif spec.kind == "random_forest":
        ht = spec.hyperparameters
        subsample = float(ht.get("subsample_fraction", 0.7))
        mf = ht.get("max_features_per_split")
        if mf is not None:
            mf = min(int(mf), x.shape[1])
        model = RandomForestRegressor(
            n_estimators=int(ht.get("n_trees", 200)),
            max_features=mf,
            min_samples_leaf=int(ht.get("min_node_size", 1)),
            bootstrap=subsample < 1.0,
            max_samples=subsample if subsample < 1.0 else None,
            random_state=seed,
            n_jobs=1,
        )
        model.fit(x, y)
    elif spec.kind == "gradient_boosting":
        ht = spec.hyperparameters
        lr = float(ht.get("learning_rate", 0.1))
        if lr == 0.0:
            # zero shrinkage: boosting never moves off the initial constant
            model = _ConstantModel(y.mean())
        else:
            early = ht.get("early_stopping")
            model = HistGradientBoostingRegressor(
                max_iter=int(ht.get("n_trees", 100)),
                max_depth=int(ht.get("max_depth", 3)),
                learning_rate=lr,
                early_stopping=bool(early),
                n_iter_no_change=int(early) if early else 10,
                random_state=seed,
            )
            model.fit(x, y)
    elif spec.kind == "logistic":
        model = _LogisticModel(LogisticRegression(
            max_iter=2000, random_state=seed).fit(x, y.astype(int)))
    else:  # pragma: no cover - guarded by LearnerSpec
        raise ConfigurationError(f"unknown learner kind: {spec.kind!r}")

    fitted = FittedLearner(spec=spec, model=model, plan=plan,
                           diagnostics=diagnostics,
                           input_columns=input_columns)
    resid = y - model.predict(x)
    fitted.diagnostics["in_sample_mse"] = float(resid @ resid / len(y))
    return fitted


def predict(fitted: FittedLearner, x: np.ndarray) -> np.ndarray:
    """Predict with a fitted learner; raises on base-column-count mismatch."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if fitted.spec.kind != "oracle" and x.shape[1] != fitted.input_columns:
        raise ConfigurationError(
            f"predict expects {fitted.input_columns} columns, got {x.shape[1]}")
    if fitted.plan is not None:
        x = apply_transform(fitted.plan, x)
    return np.asarray(fitted.model.predict(x), dtype=float).ravel()


def oracle_learner(truth: Callable, name: str = "oracle") -> FittedLearner:
    """A learner whose predictions are a known conditional expectation."""
    spec = LearnerSpec(kind="oracle", hyperparameters={"truth": truth}, name=name)
    return FittedLearner(spec=spec, model=_OracleModel(truth), plan=None)


# ---------------------------------------------------------------------------
# Built-in named learner presets
# ---------------------------------------------------------------------------

def _preset(kind, name, hyperparameters=None, transform=None):
    return dict(kind=kind, name=name,
                hyperparameters=hyperparameters or {}, transform=transform)


BUILTIN_LEARNERS = {
    "ols": _preset("ols", "ols"),
    "mean": _preset("mean", "mean"),
    "logistic": _preset("logistic", "logistic"),
    "lasso_cv": _preset("lasso_cv", "lasso_cv", transform=["standardize"]),
    "ridge_cv": _preset("ridge_cv", "ridge_cv", transform=["standardize"]),
    "lasso_cv_poly2": _preset(
        "lasso_cv", "lasso_cv_poly2",
        transform=["poly2_interactions", "standardize"]),
    "ridge_cv_poly2": _preset(
        "ridge_cv", "ridge_cv_poly2",
        transform=["poly2_interactions", "standardize"]),
    "lasso_cv_poly10": _preset(
        "lasso_cv", "lasso_cv_poly10",
        transform=[{"kind": "polynomial", "order": 10}, "standardize"]),
    "ridge_cv_poly10": _preset(
        "ridge_cv", "ridge_cv_poly10",
        transform=[{"kind": "polynomial", "order": 10}, "standardize"]),
    "rf_low": _preset(
        "random_forest", "rf_low",
        {"n_trees": 100, "max_features_per_split": 8,
         "min_node_size": 1, "subsample_fraction": 0.7}),
    "rf_high": _preset(
        "random_forest", "rf_high",
        {"n_trees": 100, "max_features_per_split": 5,
         "min_node_size": 10, "subsample_fraction": 0.7}),
    "gbt_low": _preset(
        "gradient_boosting", "gbt_low",
        {"n_trees": 500, "max_depth": 3, "learning_rate": 0.01}),
    "gbt_high": _preset(
        "gradient_boosting", "gbt_high",
        {"n_trees": 250, "max_depth": 3, "learning_rate": 0.01}),
}


def make_spec(name_or_entry, seed_stream: int = 0) -> LearnerSpec:
    """Build a LearnerSpec from a preset name or a config entry dict.

    A dict entry carries ``name`` (preset or display name), optional ``kind``,
    and optional ``hyperparameters`` / ``transform`` overrides merged on top
    of the preset.
    """
    if isinstance(name_or_entry, LearnerSpec):
        return name_or_entry
    if isinstance(name_or_entry, str):
        entry = {"name": name_or_entry}
    else:
        entry = dict(name_or_entry)
    name = entry.get("name")
    base = BUILTIN_LEARNERS.get(name)
    if base is None and "kind" not in entry:
        raise ConfigurationError(f"unknown learner: {name!r}")
    base = dict(base) if base else _preset(entry["kind"], name)
    kind = entry.get("kind", base["kind"])
    hyper = {**base["hyperparameters"], **entry.get("hyperparameters", {})}
    transform = entry.get("transform", base["transform"])
    return LearnerSpec(kind=kind, hyperparameters=hyper, transform=transform,
                       name=name or kind, seed_stream=seed_stream)
