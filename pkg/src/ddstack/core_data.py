"""Dataset representation, CSV ingestion, and deterministic feature transforms.

Transforms are fitted on a training subsample and applied with frozen
parameters, so standardization means/scales and spline knots never leak
information from held-out rows.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.preprocessing import SplineTransformer

from .errors import ConfigurationError, DataError

MISSING_TOKENS = ["NA", ""]


@dataclass
class Dataset:
    """Outcome, treatment column(s), and covariate matrix with column metadata.

    Attributes
    ----------
    y : ndarray of shape (n,)
        Outcome vector.
    d : ndarray of shape (n, q)
        Treatment columns, q >= 1.
    x : ndarray of shape (n, p)
        Covariate matrix.
    outcome_name, treatment_names, covariate_names : column labels.
    treatment_is_binary : per-treatment flag, true iff every entry is 0 or 1.
    drop_count : rows dropped during ingestion (non-finite / unparseable).
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    outcome_name: str = "y"
    treatment_names: list[str] = field(default_factory=lambda: ["d"])
    covariate_names: list[str] = field(default_factory=list)
    drop_count: int = 0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.d = np.asarray(self.d, dtype=float)
        if self.d.ndim == 1:
            self.d = self.d[:, None]
        self.x = np.asarray(self.x, dtype=float)
        n = self.y.shape[0]
        if n < 2:
            raise DataError(f"need at least 2 rows, got {n}")
        if self.d.shape[0] != n or self.x.shape[0] != n:
            raise DataError("y, d, x must have the same number of rows")
        if not (np.isfinite(self.y).all() and np.isfinite(self.d).all()
                and np.isfinite(self.x).all()):
            raise DataError("non-finite values present after ingestion")
        if not self.covariate_names:
            self.covariate_names = [f"x{j + 1}" for j in range(self.x.shape[1])]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.d.shape[1]

    @property
    def treatment_is_binary(self) -> list[bool]:
        return [bool(np.isin(self.d[:, j], (0.0, 1.0)).all())
                for j in range(self.q)]

    @property
    def column_names(self) -> list[str]:
        return [self.outcome_name] + list(self.treatment_names) + list(self.covariate_names)


def load_csv(path, outcome: str, treatments: Sequence[str],
             covariates="rest") -> Dataset:
    """Load a header-ed CSV into a :class:`Dataset`.

    Rows with unparseable or missing cells in any selected column are dropped
    and counted in ``drop_count``. "NA" and the empty string are treated as
    missing.

    Parameters
    ----------
    path : CSV file path.
    outcome : outcome column name.
    treatments : treatment column names (order preserved).
    covariates : list of covariate column names, or "rest" for every
        remaining column in file order.
    """
    try:
        frame = pd.read_csv(path, na_values=MISSING_TOKENS, keep_default_na=True)
    except FileNotFoundError:
        raise ConfigurationError(f"file not found: {path}")
    treatments = list(treatments)
    if covariates == "rest":
        used = {outcome, *treatments}
        covariates = [c for c in frame.columns if c not in used]
    else:
        covariates = list(covariates)
    for col in [outcome, *treatments, *covariates]:
        if col not in frame.columns:
            raise ConfigurationError(f"missing column: {col!r}")
    selected = frame[[outcome, *treatments, *covariates]].apply(
        pd.to_numeric, errors="coerce")
    keep = selected.notna().all(axis=1).to_numpy()
    dropped = int((~keep).sum())
    selected = selected.loc[keep]
    if len(selected) == 0:
        raise DataError("zero usable rows after dropping missing values")
    if len(selected) < 2:
        raise DataError("fewer than 2 usable rows after dropping missing values")
    return Dataset(
        y=selected[outcome].to_numpy(),
        d=selected[treatments].to_numpy(),
        x=selected[covariates].to_numpy(),
        outcome_name=outcome,
        treatment_names=treatments,
        covariate_names=covariates,
        drop_count=dropped,
    )


# ---------------------------------------------------------------------------
# Feature transforms
# ---------------------------------------------------------------------------

VALID_STEP_KINDS = {"standardize", "polynomial", "two_way_interactions",
                    "poly2_interactions", "spline"}


def _normalize_step(step) -> dict:
    if isinstance(step, str):
        step = {"kind": step}
    step = dict(step)
    kind = step.get("kind")
    if kind not in VALID_STEP_KINDS:
        raise ConfigurationError(f"unknown transform step: {kind!r}")
    if kind == "polynomial":
        order = int(step.get("order", 0))
        if order < 1:
            raise ConfigurationError("polynomial order must be >= 1")
        step["order"] = order
    if kind == "spline":
        knots = int(step.get("knots", 0))
        degree = int(step.get("degree", 0))
        if knots < 1 or degree < 1:
            raise ConfigurationError("spline needs knots >= 1 and degree >= 1")
        step["knots"] = knots
        step["degree"] = degree
        step["interact"] = bool(step.get("interact", False))
    return step


@dataclass
class TransformPlan:
    """An ordered list of transform steps with frozen fitted parameters.

    Applying a fitted plan to new rows reuses the training parameters; no
    re-fitting happens at predict time. The output column count is a
    deterministic function of the input column count and the steps.
    """

    steps: list[dict]
    fitted: list[dict]
    input_columns: int
    output_columns: int
    constant_column_warnings: int = 0


def _pair_indices(p: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(p), 2))


def _fit_step(step: dict, x: np.ndarray) -> dict:
    kind = step["kind"]
    if kind == "standardize":
        mean = x.mean(axis=0)
        scale = x.std(axis=0, ddof=0)
        constant = scale == 0.0
        scale = np.where(constant, 1.0, scale)
        return {"mean": mean, "scale": scale, "constant": constant}
    if kind == "spline":
        transformers = []
        for j in range(x.shape[1]):
            tr = SplineTransformer(
                n_knots=step["knots"] + 2, degree=step["degree"],
                knots="quantile", include_bias=False)
            tr.fit(x[:, [j]])
            transformers.append(tr)
        return {"transformers": transformers}
    return {}


def _apply_step(step: dict, params: dict, x: np.ndarray) -> np.ndarray:
    kind = step["kind"]
    p = x.shape[1]
    if kind == "standardize":
        return (x - params["mean"]) / params["scale"]
    if kind == "polynomial":
        cols = [x ** k for k in range(1, step["order"] + 1)]
        # group powers by base column: x1, x1^2, ..., x2, x2^2, ...
        stacked = np.stack(cols, axis=2)  # (n, p, order)
        return stacked.reshape(x.shape[0], p * step["order"], order="C")
    if kind == "two_way_interactions":
        pairs = _pair_indices(p)
        cross = [x[:, i] * x[:, j] for i, j in pairs]
        return np.column_stack([x] + cross) if cross else x.copy()
    if kind == "poly2_interactions":
        pairs = _pair_indices(p)
        cross = [x[:, i] * x[:, j] for i, j in pairs]
        return np.column_stack([x, x ** 2] + cross)
    if kind == "spline":
        blocks = [tr.transform(x[:, [j]])
                  for j, tr in enumerate(params["transformers"])]
        out = np.column_stack(blocks)
        if step["interact"]:
            pairs = _pair_indices(p)
            cross = [x[:, i] * x[:, j] for i, j in pairs]
            if cross:
                out = np.column_stack([out] + cross)
        return out
    raise ConfigurationError(f"unknown transform step: {kind!r}")


def fit_transform(plan_spec: Sequence, x_train: np.ndarray) -> TransformPlan:
    """Fit a transform plan on training rows and freeze its parameters."""
    x = np.asarray(x_train, dtype=float)
    steps = [_normalize_step(s) for s in plan_spec]
    fitted = []
    warnings = 0
    cur = x
    for step in steps:
        params = _fit_step(step, cur)
        if step["kind"] == "standardize":
            warnings += int(params["constant"].sum())
        fitted.append(params)
        cur = _apply_step(step, params, cur)
    return TransformPlan(
        steps=steps, fitted=fitted,
        input_columns=x.shape[1], output_columns=cur.shape[1],
        constant_column_warnings=warnings,
    )


def apply_transform(plan: TransformPlan, x: np.ndarray) -> np.ndarray:
    """Apply a fitted plan to (possibly held-out) rows using frozen parameters."""
    cur = np.asarray(x, dtype=float)
    if cur.ndim == 1:
        cur = cur[:, None]
    if cur.shape[1] != plan.input_columns:
        raise ConfigurationError(
            f"transform expects {plan.input_columns} columns, got {cur.shape[1]}")
    for step, params in zip(plan.steps, plan.fitted):
        cur = _apply_step(step, params, cur)
    return cur
