"""Fold management and the cross-fitting engine.

Produces out-of-fold predictions for every candidate learner, plus the
nested cross-validation predictions needed by conventional and pooled
stacking. Every (fold, learner) fit gets a pre-assigned RNG stream, so
results are independent of scheduling order and thread count.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from .core_data import Dataset
from .errors import ConfigurationError, DataError
from .learners import FittedLearner, LearnerSpec, fit as fit_learner, predict

#: targets resolvable by cross_fit; "m" addresses treatment column 0,
#: "m:j" addresses treatment column j; "g0" restricts training to D == 0 rows.
TARGETS = ("ell", "m", "g0")


@dataclass
class FoldAssignment:
    """A K-fold partition of {0..n-1}; fold labels run 1..K.

    Deterministic function of (n, K, seed); fold sizes differ by at most one.
    """

    n: int
    K: int
    fold_of: np.ndarray
    seed: int

    def indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)

    def sizes(self) -> list[int]:
        return [int((self.fold_of == k).sum()) for k in range(1, self.K + 1)]


def make_folds(n: int, K: int, seed: int,
               stratify_on: Optional[np.ndarray] = None) -> FoldAssignment:
    """Uniform random partition into K folds with sizes differing by <= 1.

    The remainder r = n mod K is distributed one extra observation to the
    first r folds after shuffling. With ``stratify_on`` (a binary vector),
    each class is spread across folds round-robin to guard against folds
    whose training complement lacks a treatment class.
    """
    if K < 2 or K > n:
        raise ConfigurationError(f"need 2 <= K <= n, got K={K}, n={n}")
    rng = np.random.default_rng(seed)
    fold_of = np.zeros(n, dtype=int)
    if stratify_on is None:
        perm = rng.permutation(n)
        base, rem = divmod(n, K)
        start = 0
        for k in range(1, K + 1):
            size = base + (1 if k <= rem else 0)
            fold_of[perm[start:start + size]] = k
            start += size
    else:
        stratify_on = np.asarray(stratify_on).ravel()
        labels = np.tile(np.arange(1, K + 1), n // K + 1)
        offset = 0
        for value in np.unique(stratify_on):
            members = np.flatnonzero(stratify_on == value)
            perm = members[rng.permutation(len(members))]
            fold_of[perm] = labels[offset:offset + len(members)]
            offset += len(members)
    return FoldAssignment(n=n, K=K, fold_of=fold_of, seed=seed)


def repeat_plan(R: int, base_seed: int) -> list[int]:
    """R distinct deterministic fold seeds; repetition r reuses one seed
    across all targets so the nuisance fits share folds."""
    if R < 1:
        raise ConfigurationError(f"need R >= 1, got {R}")
    return [int(base_seed) + r for r in range(R)]


@dataclass
class CrossFitMatrix:
    """Out-of-fold candidate predictions for one nuisance target.

    ``preds[i, j]`` was produced by learner j trained on the complement of
    observation i's fold (restricted to ``train_mask`` rows when set, e.g.
    controls for the g0 target). ``nested_preds[k - 1, i, j]`` holds, for
    i in T_k, learner j's prediction when trained on T_k minus i's nested
    cross-validation fold; rows outside T_k are NaN.
    """

    target: str
    preds: np.ndarray
    learner_specs: list[LearnerSpec]
    fold_assignment: FoldAssignment
    response: np.ndarray
    nested_preds: Optional[np.ndarray] = None
    nested_V: int = 0
    loss_mask: Optional[np.ndarray] = None
    n_fits: int = 0
    mspe: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def J(self) -> int:
        return self.preds.shape[1]

    def loss_rows(self) -> np.ndarray:
        if self.loss_mask is None:
            return np.arange(self.fold_assignment.n)
        return np.flatnonzero(self.loss_mask)

    def select_learners(self, names: Sequence[str]) -> "CrossFitMatrix":
        """A view restricted to the named learner columns (order preserved)."""
        index = {s.name: j for j, s in enumerate(self.learner_specs)}
        cols = [index[name] for name in names]
        return CrossFitMatrix(
            target=self.target,
            preds=self.preds[:, cols],
            learner_specs=[self.learner_specs[j] for j in cols],
            fold_assignment=self.fold_assignment,
            response=self.response,
            nested_preds=None if self.nested_preds is None
            else self.nested_preds[:, :, cols],
            nested_V=self.nested_V,
            loss_mask=self.loss_mask,
            n_fits=self.n_fits,
            mspe=self.mspe[cols],
        )

    def to_csv(self, path) -> None:
        """Audit dump: one row per observation with fold id and predictions."""
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                ["row_id", "fold"]
                + [f"learner_{j + 1}" for j in range(self.J)])
            for i in range(self.fold_assignment.n):
                writer.writerow(
                    [i, int(self.fold_assignment.fold_of[i])]
                    + [repr(v) for v in self.preds[i]])


def _resolve_target(dataset: Dataset, target: str):
    """Map a target name to (response, train_mask)."""
    if target == "ell":
        return dataset.y, None
    if target == "g0":
        d = dataset.d[:, 0]
        if not np.isin(d, (0.0, 1.0)).all():
            raise ConfigurationError("g0 target requires a binary treatment")
        return dataset.y, d == 0.0
    if target.startswith("m"):
        col = 0 if target == "m" else int(target.split(":", 1)[1])
        if col >= dataset.q:
            raise ConfigurationError(f"treatment column {col} out of range")
        return dataset.d[:, col], None
    raise ConfigurationError(f"unknown cross-fit target: {target!r}")


def _seed_for(base_seed: int, target: str, k: int, v: int, j: int) -> int:
    code = zlib.crc32(target.encode()) & 0xFFFF
    ss = np.random.SeedSequence(entropy=int(base_seed) & (2 ** 63 - 1),
                                spawn_key=(code, k, v + 1, j))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _fit_predict_task(spec, x, response, train_rows, predict_rows, seed,
                      label):
    try:
        fitted = fit_learner(spec.with_seed(seed), x[train_rows],
                             response[train_rows])
    except Exception as exc:  # surface fold/learner identity, never skip
        raise DataError(f"learner {spec.name!r} failed on {label}: {exc}") from exc
    return predict(fitted, x[predict_rows])


def cross_fit(dataset: Dataset, target: str, learners: Sequence[LearnerSpec],
              folds: FoldAssignment, with_nested: bool = False, V: int = 5,
              threads: int = 1) -> CrossFitMatrix:
    """Out-of-fold predictions for every learner, optionally with the nested
    K x V cross-validation layer used by conventional/pooled stacking.

    Learner fit failures abort with the fold/learner identity. The per-learner
    out-of-fold MSPE is computed against the target on the loss rows (controls
    only for g0).
    """
    learners = list(learners)
    if not learners:
        raise ConfigurationError("learner list must be nonempty")
    if with_nested and V < 2:
        raise ConfigurationError(f"need V >= 2 for nested predictions, got {V}")
    response, train_mask = _resolve_target(dataset, target)
    x = dataset.x
    n, K = folds.n, folds.K
    J = len(learners)

    def restrict(rows):
        if train_mask is None:
            return rows
        return rows[train_mask[rows]]

    tasks = []  # (slot, spec, train_rows, predict_rows, seed, label)
    for k in range(1, K + 1):
        t_k = folds.complement(k)
        i_k = folds.indices(k)
        train_rows = restrict(t_k)
        if len(train_rows) < 2:
            raise DataError(
                f"fold {k}: training set has {len(train_rows)} usable rows; "
                "consider stratified folds")
        for j, spec in enumerate(learners):
            seed = _seed_for(folds.seed, target, k, -1, j)
            tasks.append((("outer", k, j), spec, train_rows, i_k, seed,
                          f"fold {k}"))
        if with_nested:
            sub_seed = _seed_for(folds.seed, target + "/nested", k, -1, 0)
            sub = make_folds(len(t_k), V, sub_seed)
            for v in range(1, V + 1):
                held = t_k[sub.indices(v)]
                sub_train = restrict(t_k[sub.complement(v)])
                if len(sub_train) < 2:
                    raise DataError(
                        f"fold {k} nested fold {v}: too few usable rows")
                for j, spec in enumerate(learners):
                    seed = _seed_for(folds.seed, target, k, v, j)
                    tasks.append((("nested", k, j), spec, sub_train, held,
                                  seed, f"fold {k} nested {v}"))

    if threads > 1:
        results = Parallel(n_jobs=threads)(
            delayed(_fit_predict_task)(spec, x, response, tr, pr, seed, label)
            for _, spec, tr, pr, seed, label in tasks)
    else:
        results = [_fit_predict_task(spec, x, response, tr, pr, seed, label)
                   for _, spec, tr, pr, seed, label in tasks]

    preds = np.full((n, J), np.nan)
    nested = np.full((K, n, J), np.nan) if with_nested else None
    for (slot, spec, _, predict_rows, _, _), values in zip(tasks, results):
        kind, k, j = slot
        if kind == "outer":
            preds[predict_rows, j] = values
        else:
            nested[k - 1, predict_rows, j] = values

    loss_mask = train_mask
    loss_rows = np.arange(n) if loss_mask is None else np.flatnonzero(loss_mask)
    resid = preds[loss_rows] - response[loss_rows, None]
    mspe = (resid ** 2).mean(axis=0)

    return CrossFitMatrix(
        target=target, preds=preds, learner_specs=learners,
        fold_assignment=folds, response=response,
        nested_preds=nested, nested_V=V if with_nested else 0,
        loss_mask=loss_mask, n_fits=len(tasks), mspe=mspe,
    )
