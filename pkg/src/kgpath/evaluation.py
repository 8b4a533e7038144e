"""Macro AUC, top-k hit, cross-validation and hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.base import clone

from .cohort import Cohort, make_folds

logger = logging.getLogger(__name__)

TOP_K = (1, 3, 5, 10)
SWEEP_GRIDS = {
    "horizon": ("horizon", (2, 3, 4, 5)),
    "entropy": ("entropy_weight", (0.0, 0.01, 0.1, 1.0)),
}


def _check_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal 2-D shapes")
    return scores, labels.astype(bool)


def per_disease_auc(scores, labels) -> np.ndarray:
    """Midrank Mann-Whitney AUC per column; NaN where a column is single-class."""
    scores, labels = _check_scores(scores, labels)
    out = np.full(scores.shape[1], np.nan)
    for j in range(scores.shape[1]):
        pos = labels[:, j]
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(scores[:, j])
        out[j] = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return out


def macro_auc(scores, labels, return_skipped: bool = False):
    """Unweighted mean of per-disease AUCs over evaluable diseases."""
    aucs = per_disease_auc(scores, labels)
    ok = ~np.isnan(aucs)
    if not ok.any():
        raise ValueError("no disease has both positive and negative records")
    value = float(aucs[ok].mean())
    if return_skipped:
        return value, np.flatnonzero(~ok).tolist()
    return value


def topk_hit(scores, labels, k: int) -> float:
    """Mean number of true labels among each record's k top-ranked diseases."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores, labels = _check_scores(scores, labels)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.take_along_axis(labels, order, axis=1).sum(axis=1).mean())


def score_report(scores, labels) -> dict:
    auc, skipped = macro_auc(scores, labels, return_skipped=True)
    row = {"macro_auc": auc, "skipped_diseases": len(skipped)}
    for k in TOP_K:
        row[f"top{k}_hit"] = topk_hit(scores, labels, k)
    return row


METRICS = ("macro_auc",) + tuple(f"top{k}_hit" for k in TOP_K)


@dataclass
class EvalReport:
    folds: list[dict] = field(default_factory=list)
    label: str = ""

    def mean(self, metric: str) -> float:
        return float(np.mean([f[metric] for f in self.folds]))

    def std(self, metric: str) -> float:
        return float(np.std([f[metric] for f in self.folds]))

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def rows(self) -> list[dict]:
        rows = [{"config": self.label, "fold": str(i), **f} for i, f in enumerate(self.folds)]
        for stat, fn in (("mean", self.mean), ("std", self.std)):
            row = {"config": self.label, "fold": stat}
            row.update({m: fn(m) for m in METRICS})
            row["skipped_diseases"] = fn("skipped_diseases")
            rows.append(row)
        return rows


REPORT_COLUMNS = ("config", "fold") + METRICS + ("skipped_diseases",)


def format_reports(reports: Sequence[EvalReport]) -> str:
    """Tab-separated table: one row per (config, fold) plus mean/std rows."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, delimiter="\t", lineterminator="\n",
                       extrasaction="ignore")
    w.writeheader()
    for rep in reports:
        for row in rep.rows():
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})
    return buf.getvalue()


def _run_fold(estimator, cohort: Cohort, assignment: dict[str, int], fold: int) -> dict:
    try:
        records = cohort.labeled()
        train = [r for r in records if assignment[r.patient_id] != fold]
        test = [r for r in records if assignment[r.patient_id] == fold]
        X_tr, Y_tr, _ = cohort.to_arrays(train)
        X_te, Y_te, _ = cohort.to_arrays(test)
        model = clone(estimator).fit(X_tr, Y_tr)
        row = score_report(model.predict_proba(X_te), Y_te)
        row["n_train"], row["n_test"] = len(train), len(test)
        row["final_entropy"] = model.history_[-1].mean_entropy if model.history_ else float("nan")
        return row
    except Exception as exc:
        raise RuntimeError(f"fold {fold} failed: {exc}") from exc


def cross_validate(estimator, cohort: Cohort, folds: int = 5, seed: int = 0, workers: int = 1,
                   assignment: dict[str, int] | None = None, label: str = "") -> EvalReport:
    """Patient-level k-fold evaluation of an unfitted estimator."""
    assignment = assignment or cohort.folds or make_folds(cohort, folds, seed)
    n_folds = max(assignment.values()) + 1
    if workers > 1:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=workers)(
            delayed(_run_fold)(estimator, cohort, assignment, f) for f in range(n_folds)
        )
    else:
        rows = [_run_fold(estimator, cohort, assignment, f) for f in range(n_folds)]
    for f, row in enumerate(rows):
        logger.info("fold %d: %s", f, row)
    return EvalReport(list(rows), label)


def sweep(estimator, cohort: Cohort, axis: str, values: Sequence | None = None, folds: int = 5,
          seed: int = 0, workers: int = 1,
          on_point: Callable[[str, EvalReport], None] | None = None) -> list[EvalReport]:
    """Cross-validate once per grid value of ``axis`` ("horizon" or "entropy")."""
    if axis not in SWEEP_GRIDS:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_GRIDS)}")
    param, grid = SWEEP_GRIDS[axis]
    assignment = cohort.folds or make_folds(cohort, folds, seed)
    reports = []
    for v in grid if values is None else values:
        est = clone(estimator).set_params(**{param: v})
        rep = cross_validate(est, cohort, folds, seed, workers, assignment, label=f"{param}={v}")
        reports.append(rep)
        if on_point is not None:
            on_point(rep.label, rep)
    return reports
