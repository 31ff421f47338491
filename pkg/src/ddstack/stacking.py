"""Final-learner strategies over candidate predictions.

Provides the simplex-constrained least-squares solver (projected gradient
with Armijo backtracking from the uniform start) and the conventional /
short / pooled stacking estimators, plus OLS, single-best, and
unweighted-average final learners.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .crossfit import CrossFitMatrix
from .errors import ConfigurationError

FINAL_LEARNERS = ("cls", "ols", "single_best", "average")

#: projected-gradient norm convergence threshold
CLS_TOL = 1e-8
CLS_MAX_ITER = 10_000


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    cumsum = np.cumsum(u) - 1.0
    rho = np.flatnonzero(u > cumsum / np.arange(1, len(v) + 1))[-1]
    tau = cumsum[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def cls_solve(P: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimize ||y - P w||^2 over the probability simplex.

    Projected gradient with Armijo line search starting from the uniform
    weight vector; converges when the projected-gradient norm drops below
    1e-8 (or after 10,000 iterations). Flat objectives (duplicate columns)
    yield the deterministic converged point of this fixed iteration.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    y = np.asarray(y, dtype=float).ravel()
    n, J = P.shape
    if n < 1 or J < 1:
        raise ConfigurationError("cls_solve needs n' >= 1 and J >= 1")
    if J == 1:
        return np.ones(1)

    # normalized quadratic form: f(w) = w'Qw - 2 b'w + const
    Q = P.T @ P / n
    b = P.T @ y / n
    lips = 2.0 * float(np.linalg.eigvalsh(Q)[-1])
    step0 = 1.0 / lips if lips > 0 else 1.0

    # The iteration runs on scalar Python lists: J is small, and the
    # ill-conditioned worst case takes the full 10,000 iterations, where
    # per-call array overhead would dominate the solve.
    rows = Q.tolist()
    bs = b.tolist()
    idx = range(J)

    def proj(v):
        u = sorted(v, reverse=True)
        csum = 0.0
        tau = 0.0
        for i, ui in enumerate(u):
            csum += ui
            t = (csum - 1.0) / (i + 1)
            if ui > t:
                tau = t
        return [vi - tau if vi - tau > 0.0 else 0.0 for vi in v]

    def objective(w):
        qw = [sum(rows[i][j] * w[j] for j in idx) for i in idx]
        return sum(w[i] * qw[i] - 2.0 * bs[i] * w[i] for i in idx), qw

    w = [1.0 / J] * J
    f_w, qw = objective(w)
    for _ in range(CLS_MAX_ITER):
        grad = [2.0 * (qw[i] - bs[i]) for i in idx]
        pg = [w[i] - p for i, p in zip(idx, proj([w[i] - grad[i]
                                                  for i in idx]))]
        if sum(g * g for g in pg) < CLS_TOL * CLS_TOL:
            break
        step = step0
        for _ in range(50):  # Armijo backtracking
            cand = proj([w[i] - step * grad[i] for i in idx])
            delta = [cand[i] - w[i] for i in idx]
            f_cand, qc = objective(cand)
            bound = (f_w + sum(grad[i] * delta[i] for i in idx)
                     + sum(d * d for d in delta) / (2.0 * step))
            if f_cand <= bound:
                break
            step *= 0.5
        w, f_w, qw = cand, f_cand, qc
    return np.array(w)


def final_learn(final: str, P: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Weight vector for one of the final-learner strategies.

    cls: simplex-constrained least squares. ols: unconstrained least squares
    without intercept (minimum-norm on rank deficiency); weights may be
    negative. single_best: one-hot at the column with lowest squared loss,
    ties to the lowest index. average: 1/J everywhere.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    y = np.asarray(y, dtype=float).ravel()
    J = P.shape[1]
    if final == "cls":
        return cls_solve(P, y)
    if final == "ols":
        coef, _, _, _ = np.linalg.lstsq(P, y, rcond=None)
        return coef
    if final == "single_best":
        losses = ((P - y[:, None]) ** 2).mean(axis=0)
        w = np.zeros(J)
        w[int(np.argmin(losses))] = 1.0
        return w
    if final == "average":
        return np.full(J, 1.0 / J)
    raise ConfigurationError(f"unknown final learner: {final!r}")


@dataclass
class StackingWeights:
    """Simplex (or unconstrained, for ols) weights per nuisance function.

    ``weights`` is K x J for conventional stacking and 1 x J for short and
    pooled stacking; ``mspe`` is the per-learner out-of-fold MSPE.
    """

    mode: str
    final: str
    weights: np.ndarray
    learner_names: list[str]
    mspe: np.ndarray

    def mean_weights(self) -> np.ndarray:
        return self.weights.mean(axis=0)

    def table(self) -> list[dict]:
        mean = self.mean_weights()
        return [{"learner": name, "weight": float(mean[j]),
                 "mspe": float(self.mspe[j])}
                for j, name in enumerate(self.learner_names)]


def _require_nested(cfm: CrossFitMatrix, mode: str):
    if cfm.nested_preds is None:
        raise ConfigurationError(
            f"{mode} stacking requires nested cross-validation predictions")


def _mask_rows(cfm: CrossFitMatrix, rows: np.ndarray) -> np.ndarray:
    if cfm.loss_mask is None:
        return rows
    return rows[cfm.loss_mask[rows]]


def stack_conventional(cfm: CrossFitMatrix, y: Optional[np.ndarray] = None,
                       final: str = "cls") -> tuple[StackingWeights, np.ndarray]:
    """Per-fold weights fitted on nested CV predictions over T_k.

    The stacked out-of-fold prediction for i in I_k applies fold k's weights
    to the candidate learners refit on T_k, i.e. to the plain cross-fitted
    prediction columns.
    """
    _require_nested(cfm, "conventional")
    y = cfm.response if y is None else np.asarray(y, dtype=float).ravel()
    folds = cfm.fold_assignment
    K = folds.K
    weights = np.zeros((K, cfm.J))
    yhat = np.full(folds.n, np.nan)
    for k in range(1, K + 1):
        rows = _mask_rows(cfm, folds.complement(k))
        design = cfm.nested_preds[k - 1][rows]
        weights[k - 1] = final_learn(final, design, y[rows])
        i_k = folds.indices(k)
        yhat[i_k] = cfm.preds[i_k] @ weights[k - 1]
    sw = StackingWeights(mode="conventional", final=final, weights=weights,
                         learner_names=[s.name for s in cfm.learner_specs],
                         mspe=cfm.mspe.copy())
    return sw, yhat


def stack_short(cfm: CrossFitMatrix, y: Optional[np.ndarray] = None,
                final: str = "cls") -> tuple[StackingWeights, np.ndarray]:
    """One weight vector fitted on the full-sample cross-fitted predictions;
    no learner refits beyond the K x J already performed."""
    y = cfm.response if y is None else np.asarray(y, dtype=float).ravel()
    rows = cfm.loss_rows()
    w = final_learn(final, cfm.preds[rows], y[rows])
    yhat = cfm.preds @ w
    sw = StackingWeights(mode="short", final=final, weights=w[None, :],
                         learner_names=[s.name for s in cfm.learner_specs],
                         mspe=cfm.mspe.copy())
    return sw, yhat


def stack_pooled(cfm: CrossFitMatrix, y: Optional[np.ndarray] = None,
                 final: str = "cls") -> tuple[StackingWeights, np.ndarray]:
    """One weight vector fitted on the nested CV predictions pooled over all
    cross-fit steps k != k(i); out-of-fold predictions apply it to the
    refit candidate columns."""
    _require_nested(cfm, "pooled")
    y = cfm.response if y is None else np.asarray(y, dtype=float).ravel()
    folds = cfm.fold_assignment
    designs, targets = [], []
    for k in range(1, folds.K + 1):
        rows = _mask_rows(cfm, folds.complement(k))
        designs.append(cfm.nested_preds[k - 1][rows])
        targets.append(y[rows])
    w = final_learn(final, np.vstack(designs), np.concatenate(targets))
    yhat = cfm.preds @ w
    sw = StackingWeights(mode="pooled", final=final, weights=w[None, :],
                         learner_names=[s.name for s in cfm.learner_specs],
                         mspe=cfm.mspe.copy())
    return sw, yhat


STACKERS = {
    "conventional": stack_conventional,
    "short": stack_short,
    "pooled": stack_pooled,
}


def stack(mode: str, cfm: CrossFitMatrix, y: Optional[np.ndarray] = None,
          final: str = "cls") -> tuple[StackingWeights, np.ndarray]:
    """Dispatch on stacking mode: conventional, short, or pooled."""
    try:
        stacker = STACKERS[mode]
    except KeyError:
        raise ConfigurationError(f"unknown stacking mode: {mode!r}")
    return stacker(cfm, y, final)
