"""Confusion matrices, accuracy/precision/recall/F1, k-fold CV and report tables."""
from __future__ import annotations

import csv
import inspect
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import clone

from .errors import DegenerateFold, InvalidConfig, ShapeMismatch

UNDEFINED = "—"
METRICS = ("accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def grid(self, class_names=("Others", "Monkeypox")) -> str:
        """Two-by-two text grid, rows = actual class, columns = predicted class."""
        neg, pos = class_names
        w = max(len(neg), len(pos), len(str(max(self.tp, self.tn, self.fp, self.fn))))
        lines = [
            f"{'actual / predicted':<20}{neg:>{w + 2}}{pos:>{w + 2}}",
            f"{neg:<20}{self.tn:>{w + 2}}{self.fp:>{w + 2}}",
            f"{pos:<20}{self.fn:>{w + 2}}{self.tp:>{w + 2}}",
        ]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MetricReport:
    """Percentages in [0, 100]; None marks a metric with a zero denominator."""

    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRICS}


def _vector(x, name) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch(f"{name} must be a vector, got shape {x.shape}")
    return x


def confusion(probs, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Tally predictions; a sample is predicted positive iff ``prob >= threshold``."""
    p = _vector(probs, "probs")
    y = _vector(labels, "labels")
    if p.shape != y.shape:
        raise ShapeMismatch(f"probs {p.shape} and labels {y.shape} differ in length")
    pred = p >= threshold
    actual = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & actual)),
        tn=int(np.sum(~pred & ~actual)),
        fp=int(np.sum(pred & ~actual)),
        fn=int(np.sum(~pred & actual)),
    )


def metrics(cm: ConfusionMatrix) -> MetricReport:
    """Accuracy, precision, recall and F1 in percent.

    Recall is ``tp / (tp + fn)``, the fraction of actual positives found.
    """
    if cm.total == 0:
        raise InvalidConfig("metrics need at least one sample")
    accuracy = 100.0 * (cm.tp + cm.tn) / cm.total
    precision = 100.0 * cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else None
    recall = 100.0 * cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return MetricReport(accuracy, precision, recall, f1)


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-metric arithmetic mean over the reports where that metric is defined."""
    out = {}
    for k in METRICS:
        vals = [getattr(r, k) for r in reports if getattr(r, k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return MetricReport(**out)


def kfold_split(n: int, k: int = 4, seed: int = 0) -> list[np.ndarray]:
    """Seeded permutation of ``range(n)`` cut into ``k`` contiguous folds.

    The first ``n % k`` folds hold one extra element.
    """
    if k < 2:
        raise InvalidConfig(f"k must be >= 2, got {k}")
    if n < k:
        raise InvalidConfig(f"need at least k={k} samples, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, k)


@dataclass(frozen=True)
class FoldResult:
    fold: int
    confusion: ConfusionMatrix
    report: MetricReport
    checkpoint: object = None


@dataclass(frozen=True)
class CVReport:
    label: str
    folds: tuple[FoldResult, ...]
    average: MetricReport


def _supports_eval_set(estimator) -> bool:
    try:
        return "eval_set" in inspect.signature(estimator.fit).parameters
    except (TypeError, ValueError):
        return False


def run_fold(estimator, X, y, folds: Sequence[np.ndarray], i: int, seed: int = 0,
             threshold: float = 0.5) -> FoldResult:
    """Train a fresh clone on every fold but ``i`` and score it on fold ``i``.

    The clone's ``random_state`` (when it has one) is ``seed + i``; fold ``i``
    doubles as the checkpoint-monitoring validation set.
    """
    val_idx = np.sort(folds[i])
    train_idx = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
    y_train = y[train_idx]
    missing = [c for c in (0, 1) if not np.any(y_train == c)]
    if missing:
        raise DegenerateFold(f"training split for fold {i} has no samples of class {missing}")
    est = clone(estimator)
    if "random_state" in est.get_params():
        est.set_params(random_state=seed + i)
    kwargs = {"eval_set": (X[val_idx], y[val_idx])} if _supports_eval_set(est) else {}
    est.fit(X[train_idx], y_train, **kwargs)
    probs = est.predict_proba(X[val_idx])[:, 1]
    cm = confusion(probs, y[val_idx], threshold)
    return FoldResult(i, cm, metrics(cm), getattr(est, "checkpoint_", None))


def cross_validate(estimator, X, y, k: int = 4, seed: int = 0, label: str = "model",
                   threshold: float = 0.5, n_jobs: int = 1) -> CVReport:
    """k-fold cross-validation with a freshly cloned estimator per fold.

    ``estimator`` follows the scikit-learn protocol (``get_params``, ``fit``,
    ``predict_proba``). Folds share no state, so ``n_jobs > 1`` runs them in
    threads without changing the result.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    folds = kfold_split(len(X), k, seed)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda i: run_fold(estimator, X, y, folds, i, seed, threshold), range(k)))
    else:
        results = [run_fold(estimator, X, y, folds, i, seed, threshold) for i in range(k)]
    return CVReport(label, tuple(results), average_reports([r.report for r in results]))


# ---------------------------------------------------------------------------
# rendering

HEADER = ("Model Architecture", "Accuracy (%)", "Precision (%)", "Recall (%)", "F1_Score (%)")


def _cell(v: float | None) -> str:
    return UNDEFINED if v is None else f"{v:.2f}"


def render_table(reports: Sequence[CVReport]) -> str:
    """Fold-averaged scores, one row per model, two decimals."""
    if not reports:
        raise InvalidConfig("nothing to render")
    rows = [[r.label] + [_cell(getattr(r.average, k)) for k in METRICS] for r in reports]
    label_w = max(len(row[0]) for row in rows)
    widths = [max(len(row[c]) for row in rows) for c in range(1, 5)]
    lines = ["  ".join(HEADER)]
    for row in rows:
        cells = [row[0].ljust(label_w)] + [v.rjust(w) for v, w in zip(row[1:], widths)]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def render_csv(reports: Sequence[CVReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", *METRICS, "fold"])

    def row(label, rep, fold):
        writer.writerow([label, *("" if getattr(rep, k) is None else repr(getattr(rep, k)) for k in METRICS), fold])

    for r in reports:
        for f in r.folds:
            row(r.label, f.report, f.fold)
        row(r.label, r.average, "avg")
    return buf.getvalue()


def render_report(reports: Sequence[CVReport]) -> tuple[str, str]:
    return render_table(reports), render_csv(reports)


def parse_csv(text: str) -> list[dict]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        item = {"model": rec["model"], "fold": rec["fold"]}
        for k in METRICS:
            item[k] = float(rec[k]) if rec[k] else None
        out.append(item)
    return out
