import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import BaseEstimator, ClassifierMixin

from mpox_cbam.errors import DegenerateFold, InvalidConfig, ShapeMismatch
from mpox_cbam.evaluation import (
    UNDEFINED,
    ConfusionMatrix,
    CVReport,
    FoldResult,
    MetricReport,
    average_reports,
    confusion,
    cross_validate,
    kfold_split,
    metrics,
    parse_csv,
    render_csv,
    render_report,
    render_table,
    run_fold,
)


def brute_metrics(probs, labels, threshold=0.5):
    """Per-sample recount, written without numpy vector ops."""
    tp = tn = fp = fn = 0
    for p, y in zip(probs, labels):
        positive = p >= threshold
        if positive and y == 1:
            tp += 1
        elif positive:
            fp += 1
        elif y == 1:
            fn += 1
        else:
            tn += 1
    acc = 100.0 * (tp + tn) / (tp + tn + fp + fn)
    prec = 100.0 * tp / (tp + fp) if tp + fp else None
    rec = 100.0 * tp / (tp + fn) if tp + fn else None
    f1 = 2 * prec * rec / (prec + rec) if prec is not None and rec is not None and prec + rec else None
    return acc, prec, rec, f1


def close(a, b, tol=1e-12):
    return (a is None and b is None) or (a is not None and b is not None and abs(a - b) <= tol)


class ConstantClassifier(ClassifierMixin, BaseEstimator):
    def __init__(self, p=0.9, random_state=0):
        self.p = p
        self.random_state = random_state

    def fit(self, X, y):
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        return np.column_stack([np.full(len(X), 1 - self.p), np.full(len(X), self.p)])


class MeanThreshold(ClassifierMixin, BaseEstimator):
    """Learns the midpoint of the class means of the first feature."""

    def __init__(self, random_state=0):
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X).reshape(len(X), -1)[:, 0]
        self.cut_ = (X[y == 0].mean() + X[y == 1].mean()) / 2
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        p = (np.asarray(X).reshape(len(X), -1)[:, 0] >= self.cut_).astype(float) * 0.8 + 0.1
        return np.column_stack([1 - p, p])


class TestConfusion:
    def test_perfect_split(self):
        assert confusion([0.9, 0.2], [1, 0]) == ConfusionMatrix(tp=1, tn=1, fp=0, fn=0)

    def test_threshold_inclusive(self):
        assert confusion([0.5], [0]).fp == 1

    def test_uniform(self):
        assert confusion(np.full(10, 0.9), np.ones(10)) == ConfusionMatrix(10, 0, 0, 0)

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            confusion([0.1, 0.2], [1])

    def test_grid_layout(self):
        lines = ConfusionMatrix(tp=4, tn=3, fp=2, fn=1).grid().splitlines()
        assert lines[1].split()[-2:] == ["3", "2"] and lines[2].split()[-2:] == ["1", "4"]


class TestMetrics:
    def test_hand_values(self):
        r = metrics(ConfusionMatrix(tp=5, tn=3, fp=1, fn=1))
        assert r.accuracy == pytest.approx(80.0, abs=1e-12)
        for v in (r.precision, r.recall, r.f1):
            assert v == pytest.approx(250 / 3, abs=1e-12)

    def test_recall_is_over_actual_positives(self):
        r = metrics(ConfusionMatrix(tp=6, tn=50, fp=2, fn=3))
        assert r.recall == pytest.approx(100 * 6 / 9, abs=1e-12)

    def test_perfect(self):
        assert metrics(ConfusionMatrix(7, 0, 0, 0)) == MetricReport(100.0, 100.0, 100.0, 100.0)

    def test_no_positives(self):
        assert metrics(ConfusionMatrix(0, 9, 0, 0)) == MetricReport(100.0, None, None, None)

    def test_zero_precision_and_recall(self):
        assert metrics(ConfusionMatrix(0, 1, 1, 1)).f1 is None

    def test_empty(self):
        with pytest.raises(InvalidConfig):
            metrics(ConfusionMatrix(0, 0, 0, 0))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.sampled_from([0, 1])), min_size=1, max_size=200),
           st.floats(0.05, 0.95))
    def test_brute_force_oracle(self, pairs, threshold):
        probs, labels = zip(*pairs)
        r = metrics(confusion(np.array(probs), np.array(labels), threshold))
        for got, want in zip((r.accuracy, r.precision, r.recall, r.f1), brute_metrics(probs, labels, threshold)):
            assert close(got, want)
        for v in r.as_dict().values():
            assert v is None or 0 <= v <= 100
        if r.f1 is not None:
            assert min(r.precision, r.recall) - 1e-9 <= r.f1 <= max(r.precision, r.recall) + 1e-9


class TestKFold:
    def test_even(self):
        folds = kfold_split(8, 4)
        assert [len(f) for f in folds] == [2, 2, 2, 2]
        assert sorted(np.concatenate(folds).tolist()) == list(range(8))

    def test_remainder(self):
        assert [len(f) for f in kfold_split(10, 4)] == [3, 3, 2, 2]

    def test_deterministic(self):
        a, b = kfold_split(30, 4, seed=5), kfold_split(30, 4, seed=5)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    @pytest.mark.parametrize("n, k", [(5, 1), (3, 4)])
    def test_invalid(self, n, k):
        with pytest.raises(InvalidConfig):
            kfold_split(n, k)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 300).flatmap(lambda n: st.tuples(st.just(n), st.integers(2, n))), st.integers(0, 2**32 - 1))
    def test_partition(self, nk, seed):
        n, k = nk
        folds = kfold_split(n, k, seed)
        sizes = [len(f) for f in folds]
        assert len(folds) == k and sum(sizes) == n
        assert sorted(np.concatenate(folds).tolist()) == list(range(n))
        assert sizes == sorted(sizes, reverse=True) and max(sizes) - min(sizes) <= 1


class TestCrossValidate:
    def data(self, n=40, seed=0):
        rng = np.random.default_rng(seed)
        y = np.arange(n) % 2
        X = (rng.normal(size=(n, 1, 2, 2)) + 3 * y[:, None, None, None])
        return X, y

    def test_constant_classifier_oracle(self):
        X, y = self.data(42)
        rep = cross_validate(ConstantClassifier(), X, y, k=4, seed=3)
        folds = kfold_split(42, 4, seed=3)
        expected = [100.0 * y[f].mean() for f in folds]
        assert [r.report.accuracy for r in rep.folds] == pytest.approx(expected, abs=1e-12)
        assert rep.average.accuracy == pytest.approx(sum(expected) / 4, abs=1e-12)
        assert all(r.report.recall == 100.0 for r in rep.folds)

    def test_structure_and_average(self):
        X, y = self.data()
        rep = cross_validate(MeanThreshold(), X, y, k=4, label="m")
        assert [f.fold for f in rep.folds] == [0, 1, 2, 3]
        assert sum(f.confusion.total for f in rep.folds) == 40
        for k in ("accuracy", "precision", "recall", "f1"):
            vals = [getattr(f.report, k) for f in rep.folds]
            assert abs(getattr(rep.average, k) - sum(vals) / 4) <= 1e-12

    def test_fold_order_independent(self):
        X, y = self.data()
        folds = kfold_split(40, 4, seed=0)
        forward = [run_fold(MeanThreshold(), X, y, folds, i) for i in range(4)]
        backward = [run_fold(MeanThreshold(), X, y, folds, i) for i in reversed(range(4))][::-1]
        assert forward == backward
        assert cross_validate(MeanThreshold(), X, y, k=4).folds == tuple(forward)

    def test_threads_match_serial(self):
        X, y = self.data()
        assert cross_validate(MeanThreshold(), X, y, n_jobs=3) == cross_validate(MeanThreshold(), X, y)

    def test_degenerate_fold(self):
        X = np.zeros((8, 1, 1, 1))
        y = np.array([0, 0, 0, 0, 0, 0, 0, 1])
        folds = [np.array([7]), np.array([0, 1]), np.array([2, 3, 4]), np.array([5, 6])]
        with pytest.raises(DegenerateFold):
            run_fold(ConstantClassifier(), X, y, folds, 0)

    def test_seed_per_fold(self):
        seen = []

        class Recorder(ConstantClassifier):
            def fit(self, X, y):
                seen.append(self.random_state)
                return super().fit(X, y)

        X, y = self.data()
        cross_validate(Recorder(), X, y, k=4, seed=10)
        assert seen == [10, 11, 12, 13]


def report(label, *values):
    r = MetricReport(*values)
    return CVReport(label, (FoldResult(0, ConfusionMatrix(1, 1, 0, 0), r),), r)


class TestRender:
    def test_row_layout(self):
        table = render_table([report("Xception-CBAM-Dense", 83.89, 90.70, 89.10, 90.11)])
        header, row = table.splitlines()
        assert row == "Xception-CBAM-Dense  83.89  90.70  89.10  90.11"
        assert header.split("  ") == ["Model Architecture", "Accuracy (%)", "Precision (%)", "Recall (%)",
                                      "F1_Score (%)"]

    def test_undefined_cell(self):
        row = render_table([report("m", 50.0, None, 0.0, None)]).splitlines()[1]
        assert row.split() == ["m", "50.00", UNDEFINED, "0.00", UNDEFINED]

    def test_one_row_per_model(self):
        table = render_table([report("a", 1, 2, 3, 4), report("longer-name", 10, 20, 30, 40)])
        lines = table.splitlines()
        assert len(lines) == 3 and lines[1].startswith("a ") and lines[2].startswith("longer-name")
        assert len(lines[1]) == len(lines[2])

    def test_empty(self):
        with pytest.raises(InvalidConfig):
            render_table([])

    def test_csv_round_trip(self):
        reps = [report("a", 1 / 3, None, 2 / 7, 99.999999999), report("b", 50.0, 60.0, 70.0, 64.6153846)]
        text = render_csv(reps)
        assert text.splitlines()[0] == "model,accuracy,precision,recall,f1,fold"
        rows = parse_csv(text)
        assert [(r["model"], r["fold"]) for r in rows] == [("a", "0"), ("a", "avg"), ("b", "0"), ("b", "avg")]
        for r, rep in zip(rows[::2], reps):
            assert {k: r[k] for k in ("accuracy", "precision", "recall", "f1")} == rep.average.as_dict()

    def test_render_report_pair(self):
        reps = [report("a", 1, 2, 3, 4)]
        assert render_report(reps) == (render_table(reps), render_csv(reps))


def test_average_skips_undefined():
    avg = average_reports([MetricReport(50, None, 10, None), MetricReport(100, 80, 30, 40)])
    assert avg == MetricReport(75.0, 80.0, 20.0, 40.0)
