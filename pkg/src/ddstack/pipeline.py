"""End-to-end DDML runs: folds -> cross-fit -> stacking -> estimate,
repeated over cross-fitting repetitions and aggregated.

Used by both the CLI and the Monte Carlo harness.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_data import Dataset
from .crossfit import CrossFitMatrix, cross_fit, make_folds, repeat_plan
from .errors import ConfigurationError, DataError
from .estimators import (NuisanceEstimates, PointEstimate, RepetitionSet,
                         aggregate_repetitions, atet_estimate, plm_estimate)
from .learners import LearnerSpec
from .stacking import FINAL_LEARNERS, StackingWeights, stack


@dataclass
class EstimatorSettings:
    """Resolved estimator block: stacking mode, final learner, fold structure."""

    learners: list[LearnerSpec]
    mode: str = "short"
    final: str = "cls"
    K: int = 5
    V: int = 5
    R: int = 1
    aggregation: str = "median"
    stratify_folds: bool = False
    propensity_learners: Optional[list[LearnerSpec]] = None

    def __post_init__(self):
        if not self.learners:
            raise ConfigurationError("learner list must be nonempty")
        if self.mode not in ("short", "conventional", "pooled"):
            raise ConfigurationError(f"unknown stacking mode: {self.mode!r}")
        if self.final not in FINAL_LEARNERS:
            raise ConfigurationError(f"unknown final learner: {self.final!r}")
        if self.K < 2:
            raise ConfigurationError("need K >= 2")
        if self.needs_nested and self.V < 2:
            raise ConfigurationError("need V >= 2 for nested stacking modes")
        if self.R < 1:
            raise ConfigurationError("need R >= 1")
        if self.aggregation not in ("median", "mean"):
            raise ConfigurationError(f"unknown aggregation: {self.aggregation!r}")

    @property
    def needs_nested(self) -> bool:
        return self.mode in ("conventional", "pooled")


@dataclass
class RepetitionDetail:
    """Everything recorded for one cross-fitting repetition."""

    seed: int
    estimate: PointEstimate
    weights: dict[str, StackingWeights]
    mspe: dict[str, np.ndarray]
    n_fits: int


@dataclass
class RunResult:
    """Aggregate estimate plus the per-repetition trace."""

    repetition_set: RepetitionSet
    details: list[RepetitionDetail]
    learner_names: list[str]
    settings: EstimatorSettings
    base_seed: int
    elapsed_seconds: float = 0.0
    total_fits: int = 0

    @property
    def aggregate(self) -> PointEstimate:
        return self.repetition_set.aggregate

    def mean_weights(self, target: str) -> np.ndarray:
        return np.mean([d.weights[target].mean_weights() for d in self.details],
                       axis=0)

    def mean_mspe(self, target: str) -> np.ndarray:
        return np.mean([d.mspe[target] for d in self.details], axis=0)


def _stack_target(settings: EstimatorSettings,
                  cfm: CrossFitMatrix) -> tuple[StackingWeights, np.ndarray]:
    return stack(settings.mode, cfm, final=settings.final)


def ddml_plm(dataset: Dataset, settings: EstimatorSettings, base_seed: int,
             threads: int = 1) -> RunResult:
    """DDML estimate of the partially linear model coefficient(s).

    Within each repetition, the outcome and every treatment nuisance share
    one fold assignment so the residuals align.
    """
    start = time.perf_counter()
    seeds = repeat_plan(settings.R, base_seed)
    details = []
    estimates = []
    stratify = dataset.d[:, 0] if settings.stratify_folds else None
    for seed in seeds:
        folds = make_folds(dataset.n, settings.K, seed, stratify_on=stratify)
        weights: dict[str, StackingWeights] = {}
        mspe: dict[str, np.ndarray] = {}
        n_fits = 0

        cfm_ell = cross_fit(dataset, "ell", settings.learners, folds,
                            with_nested=settings.needs_nested,
                            V=settings.V, threads=threads)
        weights["ell"], ell_hat = _stack_target(settings, cfm_ell)
        mspe["ell"] = cfm_ell.mspe
        n_fits += cfm_ell.n_fits

        m_hat = np.empty((dataset.n, dataset.q))
        for j in range(dataset.q):
            target = f"m:{j}"
            cfm_m = cross_fit(dataset, target, settings.learners, folds,
                              with_nested=settings.needs_nested,
                              V=settings.V, threads=threads)
            weights[target], m_hat[:, j] = _stack_target(settings, cfm_m)
            mspe[target] = cfm_m.mspe
            n_fits += cfm_m.n_fits

        est = plm_estimate(dataset.y, dataset.d,
                           NuisanceEstimates(ell_hat=ell_hat, m_hat=m_hat))
        est.method.update(_method_metadata(settings))
        estimates.append(est)
        details.append(RepetitionDetail(seed=seed, estimate=est,
                                        weights=weights, mspe=mspe,
                                        n_fits=n_fits))
    aggregate = aggregate_repetitions(estimates, settings.aggregation)
    return RunResult(
        repetition_set=RepetitionSet(estimates=estimates, aggregate=aggregate,
                                     aggregation=settings.aggregation),
        details=details,
        learner_names=[s.name for s in settings.learners],
        settings=settings, base_seed=base_seed,
        elapsed_seconds=time.perf_counter() - start,
        total_fits=sum(d.n_fits for d in details),
    )


def _check_both_classes(dataset: Dataset, folds) -> None:
    d = dataset.d[:, 0]
    for k in range(1, folds.K + 1):
        train = folds.complement(k)
        if d[train].min() == d[train].max():
            raise DataError(
                f"fold {k}: training set lacks a treatment class; "
                "consider stratified folds (stratify_folds = true)")


def ddml_atet(dataset: Dataset, settings: EstimatorSettings, base_seed: int,
              threads: int = 1) -> RunResult:
    """DDML efficient-score estimate of the ATET for a binary treatment.

    Nuisances per repetition: the control-outcome CEF (g0, trained on
    control rows only), the propensity (m), and the fold-local treated
    share (p). Propensity learners default to the outcome learner list.
    """
    if dataset.q != 1:
        raise ConfigurationError("atet requires a single treatment column")
    if not dataset.treatment_is_binary[0]:
        raise ConfigurationError("treatment not binary")
    prop_learners = settings.propensity_learners or settings.learners
    start = time.perf_counter()
    seeds = repeat_plan(settings.R, base_seed)
    stratify = dataset.d[:, 0] if settings.stratify_folds else None
    details, estimates = [], []
    for seed in seeds:
        folds = make_folds(dataset.n, settings.K, seed, stratify_on=stratify)
        _check_both_classes(dataset, folds)
        weights, mspe = {}, {}

        cfm_g0 = cross_fit(dataset, "g0", settings.learners, folds,
                           with_nested=settings.needs_nested,
                           V=settings.V, threads=threads)
        weights["g0"], g0_hat = _stack_target(settings, cfm_g0)
        mspe["g0"] = cfm_g0.mspe

        cfm_m = cross_fit(dataset, "m:0", prop_learners, folds,
                          with_nested=settings.needs_nested,
                          V=settings.V, threads=threads)
        weights["m:0"], m_hat = _stack_target(settings, cfm_m)
        mspe["m:0"] = cfm_m.mspe

        est = atet_estimate(dataset.y, dataset.d[:, 0],
                            NuisanceEstimates(g0_hat=g0_hat, m_hat=m_hat),
                            folds=folds)
        est.method.update(_method_metadata(settings))
        estimates.append(est)
        details.append(RepetitionDetail(
            seed=seed, estimate=est, weights=weights, mspe=mspe,
            n_fits=cfm_g0.n_fits + cfm_m.n_fits))
    aggregate = aggregate_repetitions(estimates, settings.aggregation)
    return RunResult(
        repetition_set=RepetitionSet(estimates=estimates, aggregate=aggregate,
                                     aggregation=settings.aggregation),
        details=details,
        learner_names=[s.name for s in settings.learners],
        settings=settings, base_seed=base_seed,
        elapsed_seconds=time.perf_counter() - start,
        total_fits=sum(d.n_fits for d in details),
    )


def _method_metadata(settings: EstimatorSettings) -> dict:
    return {
        "stacking_mode": settings.mode,
        "final_learner": settings.final,
        "K": settings.K,
        "V": settings.V if settings.needs_nested else None,
        "R": settings.R,
    }
