"""Structural-parameter estimation from cross-fitted nuisances.

Implements the residual-on-residual estimator for the partially linear
model (scalar and vector treatment) with HC0 heteroskedasticity-robust
standard errors, the efficient-score estimator of the average treatment
effect on the treated, and mean/median aggregation over cross-fitting
repetitions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .crossfit import FoldAssignment
from .errors import ConfigurationError, DataError, NumericalError

#: normal quantile for 95% confidence intervals
Z_975 = 1.959964

#: propensity clip applied before forming ATET score terms
PROPENSITY_EPS = 1e-6


@dataclass
class NuisanceEstimates:
    """Cross-fitted nuisance values evaluated at the sample points.

    ``p_hat`` may be a scalar (global treated share) or a length-n vector
    holding each observation's fold-local estimate.
    """

    ell_hat: Optional[np.ndarray] = None
    m_hat: Optional[np.ndarray] = None
    g0_hat: Optional[np.ndarray] = None
    p_hat: Optional[np.ndarray] = None


@dataclass
class PointEstimate:
    """Point estimate(s) with robust SE and 95% normal confidence interval."""

    theta_hat: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n: int
    method: dict = field(default_factory=dict)
    influence: Optional[np.ndarray] = None
    clip_count: int = 0

    def __post_init__(self):
        self.theta_hat = np.atleast_1d(np.asarray(self.theta_hat, dtype=float))
        self.se = np.atleast_1d(np.asarray(self.se, dtype=float))
        self.ci_low = np.atleast_1d(np.asarray(self.ci_low, dtype=float))
        self.ci_high = np.atleast_1d(np.asarray(self.ci_high, dtype=float))

    @property
    def q(self) -> int:
        return len(self.theta_hat)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "se": self.se.tolist(),
            "ci_low": self.ci_low.tolist(),
            "ci_high": self.ci_high.tolist(),
            "n": self.n,
            "method": self.method,
        }


@dataclass
class RepetitionSet:
    """Per-repetition estimates plus their mean/median aggregate."""

    estimates: list[PointEstimate]
    aggregate: PointEstimate
    aggregation: str

    @property
    def R(self) -> int:
        return len(self.estimates)


def plm_estimate(y: np.ndarray, d: np.ndarray,
                 nuis: NuisanceEstimates) -> PointEstimate:
    """Partially-linear-model estimator from cross-fitted nuisances.

    Regresses the outcome residual y - ell_hat on the treatment residual
    d - m_hat; the scalar case reduces to the ratio of cross moments. SEs
    are HC0 sandwich, CIs use the 1.959964 normal quantile.
    """
    y = np.asarray(y, dtype=float).ravel()
    d = np.asarray(d, dtype=float)
    if d.ndim == 1:
        d = d[:, None]
    n, q = d.shape
    ell_hat = np.asarray(nuis.ell_hat, dtype=float).ravel()
    m_hat = np.asarray(nuis.m_hat, dtype=float)
    if m_hat.ndim == 1:
        m_hat = m_hat[:, None]
    y_res = y - ell_hat
    d_res = d - m_hat

    gram = d_res.T @ d_res
    if q == 1:
        denom = float(gram[0, 0])
        if denom <= 0.0:
            raise NumericalError(
                "degenerate denominator: m_hat reproduces the treatment "
                "exactly, sum of squared treatment residuals is zero")
        theta = np.array([float(d_res[:, 0] @ y_res) / denom])
        gram_inv = np.array([[1.0 / denom]])
    else:
        if np.linalg.matrix_rank(gram) < q:
            raise NumericalError(
                "degenerate treatment residual design: rank deficient")
        gram_inv = np.linalg.inv(gram)
        theta = gram_inv @ (d_res.T @ y_res)

    u_hat = y_res - d_res @ theta
    meat = (d_res * u_hat[:, None]).T @ (d_res * u_hat[:, None])
    cov = gram_inv @ meat @ gram_inv
    se = np.sqrt(np.diag(cov))
    return PointEstimate(
        theta_hat=theta, se=se,
        ci_low=theta - Z_975 * se, ci_high=theta + Z_975 * se,
        n=n, method={"estimator": "plm"},
    )


def _per_observation_p(p_hat, d: np.ndarray,
                       folds: Optional[FoldAssignment]) -> np.ndarray:
    n = len(d)
    if p_hat is not None:
        arr = np.asarray(p_hat, dtype=float)
        if arr.ndim == 0:
            return np.full(n, float(arr))
        if arr.shape == (n,):
            return arr
        raise ConfigurationError("p_hat must be a scalar or a length-n vector")
    if folds is None:
        raise ConfigurationError("atet_estimate needs p_hat or a fold assignment")
    out = np.empty(n)
    for k in range(1, folds.K + 1):
        train = folds.complement(k)
        out[folds.indices(k)] = d[train].mean()
    return out


def atet_estimate(y: np.ndarray, d: np.ndarray, nuis: NuisanceEstimates,
                  folds: Optional[FoldAssignment] = None) -> PointEstimate:
    """Efficient-score estimator of the average treatment effect on the treated.

    Uses cross-fitted g0 (control-outcome CEF) and propensity m_hat, with a
    fold-local treated share for p_hat when not supplied. Propensities at or
    above 1 - eps are clipped and counted. The SE is the sample standard
    deviation of the per-observation score divided by sqrt(n).
    """
    y = np.asarray(y, dtype=float).ravel()
    d = np.asarray(d, dtype=float).ravel()
    n = len(y)
    if not np.isin(d, (0.0, 1.0)).all():
        raise ConfigurationError("treatment not binary")
    if d.min() == d.max():
        raise DataError("treatment has a single class")
    g0 = np.asarray(nuis.g0_hat, dtype=float).ravel()
    m = np.asarray(nuis.m_hat, dtype=float).ravel()
    clip_count = int(((m < PROPENSITY_EPS) | (m > 1.0 - PROPENSITY_EPS)).sum())
    m = np.clip(m, PROPENSITY_EPS, 1.0 - PROPENSITY_EPS)
    p = _per_observation_p(nuis.p_hat, d, folds)

    resid = y - g0
    score = d * resid / p - m * (1.0 - d) * resid / (p * (1.0 - m))
    theta = float(score.mean())
    se = float(score.std(ddof=1) / np.sqrt(n))
    return PointEstimate(
        theta_hat=np.array([theta]), se=np.array([se]),
        ci_low=np.array([theta - Z_975 * se]),
        ci_high=np.array([theta + Z_975 * se]),
        n=n, method={"estimator": "atet"},
        influence=score, clip_count=clip_count,
    )


def aggregate_repetitions(estimates: Sequence[PointEstimate],
                          how: str = "median") -> PointEstimate:
    """Mean or median aggregation over repetition estimates.

    The aggregate SE folds in the dispersion of the per-repetition point
    estimates: per repetition, sqrt(se_r^2 + (theta_r - theta_agg)^2), then
    the median (or mean) of those across repetitions.
    """
    estimates = list(estimates)
    if not estimates:
        raise ConfigurationError("need at least one repetition estimate")
    if how not in ("median", "mean"):
        raise ConfigurationError(f"unknown aggregation: {how!r}")
    qs = {e.q for e in estimates}
    if len(qs) != 1:
        raise ConfigurationError("repetition estimates differ in dimension")
    thetas = np.stack([e.theta_hat for e in estimates])
    ses = np.stack([e.se for e in estimates])
    combine = np.median if how == "median" else np.mean
    theta_agg = combine(thetas, axis=0)
    se_agg = combine(np.sqrt(ses ** 2 + (thetas - theta_agg) ** 2), axis=0)
    return PointEstimate(
        theta_hat=theta_agg, se=se_agg,
        ci_low=theta_agg - Z_975 * se_agg,
        ci_high=theta_agg + Z_975 * se_agg,
        n=estimates[0].n,
        method={**estimates[0].method, "aggregation": how,
                "repetitions": len(estimates)},
    )
