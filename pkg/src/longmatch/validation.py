"""Subject-level cross-validation and residual diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import ComparisonTable
from .lmm import FittedModel, ModelSpec, build_design, fit_reml
from .rng import sample_indices, shuffled

SHAPIRO_MAX_N = 5000


@dataclass(frozen=True)
class FoldResult:
    fold: int
    oos_r2: float
    rmse: float
    n_test_subjects: int
    n_test_rows: int


@dataclass(frozen=True)
class CvReport:
    k: int
    per_fold: tuple[FoldResult, ...]
    mean_oos_r2: float
    mean_rmse: float
    fold_subjects: tuple[tuple[str, ...], ...]


def kfold_subject_cv(table: ComparisonTable, spec: ModelSpec, k: int,
                     seed: int) -> CvReport:
    """k-fold CV partitioning subjects, never rows.

    Subjects are shuffled deterministically by the seed and dealt round-robin
    into k folds. Held-out predictions use fixed effects only: random effects
    are unavailable for unseen subjects, which is exactly why out-of-sample
    R2 sits below the within-sample marginal R2 when between-subject
    heterogeneity is strong.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    subjects = table.subjects()
    if len(subjects) < k:
        raise ValueError(f"need at least k={k} subjects, have {len(subjects)}")
    order = shuffled(subjects, seed)
    folds = [tuple(order[i::k]) for i in range(k)]

    results = []
    for fold_idx, held_out in enumerate(folds):
        held = set(held_out)
        test_mask = np.fromiter((s in held for s in table.gallery_subject),
                                dtype=bool, count=len(table))
        if not test_mask.any():
            raise ValueError(f"fold {fold_idx} has zero rows")
        train = table.select(~test_mask)
        test = table.select(test_mask)

        design_train = build_design(train, spec)
        fit = fit_reml(design_train.y, design_train.X, design_train.t,
                       design_train.group_index, design=design_train)
        design_test = build_design(test, spec, like=design_train)
        y = design_test.y
        pred = fit.predict_fixed(design_test.X)
        err = y - pred
        sse = float(err @ err)
        sst = float(np.sum((y - y.mean()) ** 2))
        oos_r2 = 1.0 - sse / sst
        rmse = float(np.sqrt(np.mean(err ** 2)))
        results.append(FoldResult(fold_idx, oos_r2, rmse, len(held_out), int(test_mask.sum())))

    return CvReport(
        k=k, per_fold=tuple(results),
        mean_oos_r2=float(np.mean([r.oos_r2 for r in results])),
        mean_rmse=float(np.mean([r.rmse for r in results])),
        fold_subjects=tuple(folds),
    )


@dataclass(frozen=True)
class DiagnosticsReport:
    shapiro_w: float
    shapiro_p: float
    n_residuals: int
    n_used: int
    subsampled: bool
    sample_quantiles: np.ndarray        # sorted standardized residuals
    theoretical_quantiles: np.ndarray   # matching normal quantiles (Blom)
    fitted: np.ndarray
    residuals: np.ndarray


def residual_diagnostics(fit: FittedModel, y=None, X=None,
                         subsample_seed: int = 0) -> DiagnosticsReport:
    """Marginal residuals y - Xb with Q-Q export and Shapiro-Wilk W.

    W uses Royston's approximation, valid for 3 <= n <= 5000; beyond that a
    seeded subsample of 5000 residuals is tested and the report is flagged
    as subsampled.
    """
    if y is None:
        y = fit._internal["y"]
    if X is None:
        X = fit._internal["X"]
    y = np.asarray(y, dtype=np.float64)
    resid = y - fit.predict_fixed(X)
    n = len(resid)
    if n < 3:
        raise ValueError("need at least 3 residuals")
    sd = float(np.std(resid, ddof=1))
    if sd == 0.0:
        raise ValueError("residuals have zero variance")

    if n > SHAPIRO_MAX_N:
        idx = sample_indices(n, SHAPIRO_MAX_N, subsample_seed)
        tested = resid[np.array(idx, dtype=np.int64)]
        subsampled = True
    else:
        tested = resid
        subsampled = False
    w, p = stats.shapiro(tested)

    standardized = np.sort((resid - resid.mean()) / sd)
    ranks = np.arange(1, n + 1)
    theo = stats.norm.ppf((ranks - 0.375) / (n + 0.25))
    return DiagnosticsReport(
        shapiro_w=float(w), shapiro_p=float(p), n_residuals=n,
        n_used=len(tested), subsampled=subsampled,
        sample_quantiles=standardized, theoretical_quantiles=theo,
        fitted=fit.predict_fixed(X), residuals=resid,
    )
