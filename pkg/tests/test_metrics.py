from fractions import Fraction

import numpy as np
import pytest

from imbf import metrics
from imbf.metrics import ClassificationReport, ClassMetrics, ConfusionMatrix, MetricsError


def brute_force(preds, labels, k):
    """Recount TP/FP/FN for every class straight from the pairs."""
    out = []
    for c in range(k):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
        out.append((prec, rec, f1, tp + fn))
    acc = Fraction(sum(1 for p, y in zip(preds, labels) if p == y), len(labels)) if labels else None
    return out, acc


def test_confusion_matrix_counting():
    cm = metrics.confusion_matrix([0, 1, 1, 0], [0, 1, 0, 0], 2)
    assert cm.cells.tolist() == [[2, 1], [0, 1]]
    assert metrics.accuracy(cm) == 0.75


def test_confusion_matrix_perfect_and_empty():
    labels = [0, 2, 2, 1, 2]
    cm = metrics.confusion_matrix(labels, labels, 3)
    assert cm.cells.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 3]]
    assert metrics.confusion_matrix([], [], 4).cells.tolist() == [[0] * 4] * 4


def test_confusion_matrix_errors():
    with pytest.raises(MetricsError):
        metrics.confusion_matrix([0, 1], [0], 2)
    with pytest.raises(MetricsError):
        metrics.confusion_matrix([0, 2], [0, 1], 2)


def test_per_class_hand_values():
    # class 0: TP=8, FP=2, FN=4
    cells = np.array([[8, 4], [2, 6]])
    m = metrics.per_class_metrics(ConfusionMatrix(("a", "b"), cells))[0]
    assert m.precision == pytest.approx(0.8)
    assert m.recall == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(16 / 22)
    assert round(m.recall, 4) == 0.6667 and round(m.f1, 4) == 0.7273
    assert m.support == 12


def test_diagonal_and_absent_class():
    cm = ConfusionMatrix(("a", "b", "c"), np.diag([3, 5, 0]))
    ms = metrics.per_class_metrics(cm)
    for m in ms[:2]:
        assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0) and m.zero_denominator == ()
    assert (ms[2].precision, ms[2].recall, ms[2].f1) == (0.0, 0.0, 0.0)
    assert set(ms[2].zero_denominator) == {"precision", "recall", "f1"}
    assert metrics.accuracy(cm) == 1.0


def test_accuracy_edge_cases():
    assert metrics.accuracy(ConfusionMatrix(("a", "b"), np.array([[0, 3], [4, 0]]))) == 0.0
    with pytest.raises(MetricsError):
        metrics.accuracy(ConfusionMatrix(("a", "b"), np.zeros((2, 2), dtype=np.int64)))


def test_metrics_agree_with_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(300):
        k = int(rng.choice([2, 8]))
        n = int(rng.integers(1, 200))
        labels = rng.integers(0, k, n).tolist()
        preds = rng.integers(0, k, n).tolist()
        cm = metrics.confusion_matrix(preds, labels, k)
        expected, acc = brute_force(preds, labels, k)
        got = metrics.per_class_metrics(cm, exact=True)
        assert [(m.precision, m.recall, m.f1, m.support) for m in got] == expected
        assert metrics.accuracy(cm, exact=True) == acc


def test_metric_relations():
    rng = np.random.default_rng(1)
    for _ in range(200):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 60))
        cm = metrics.confusion_matrix(rng.integers(0, k, n), rng.integers(0, k, n), k)
        assert sum(m.support for m in metrics.per_class_metrics(cm)) == cm.total
        for m in metrics.per_class_metrics(cm, exact=True):
            assert 0 <= m.precision <= 1 and 0 <= m.recall <= 1 and 0 <= m.f1 <= 1
            assert (m.f1 == 0) == (m.precision == 0 or m.recall == 0)
            if m.precision == m.recall:
                assert m.f1 == m.precision


def test_binary_accuracy_equals_one_vs_rest_formula():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        cm = metrics.confusion_matrix(rng.integers(0, 2, n), rng.integers(0, 2, n), 2)
        for c in (0, 1):
            tp, fp, fn, tn = metrics.one_vs_rest(cm, c)
            assert metrics.accuracy(cm, exact=True) == Fraction(tp + tn, tp + tn + fp + fn)


def _report(rows, acc):
    return ClassificationReport("binary", acc, [ClassMetrics(n, p, r, f, s) for n, p, r, f, s in rows])


def test_compare_reports():
    a = _report([("Benign", 0.99, 0.92, 0.96, 248), ("Malignant", 0.97, 1.00, 0.98, 543)], 0.9735)
    b = _report([("Benign", 0.99, 0.95, 0.97, 248), ("Malignant", 0.98, 1.00, 0.99, 543)], 0.9823)
    d = metrics.compare_reports(a, b)
    benign = d["classes"][0]
    assert abs(benign["recall"] - 0.03) <= 1e-12
    assert benign["precision"] == 0.0
    assert abs(d["accuracy"] - 0.0088) <= 1e-12
    zero = metrics.compare_reports(a, a)
    assert zero["accuracy"] == 0 and all(v == 0 for c in zero["classes"] for k, v in c.items() if k != "name")


def test_compare_reports_multiclass_accuracy_delta():
    a = _report([("A", 0.98, 1.0, 1.0, 44)], 0.9127)
    b = _report([("A", 1.0, 1.0, 1.0, 44)], 0.9454)
    assert abs(metrics.compare_reports(a, b)["accuracy"] - 0.0327) <= 1e-12


def test_compare_reports_class_mismatch():
    with pytest.raises(MetricsError):
        metrics.compare_reports(_report([("A", 1, 1, 1, 1)], 1.0), _report([("B", 1, 1, 1, 1)], 1.0))


def test_report_json_and_csv():
    cm = metrics.confusion_matrix([0, 1, 1, 2, 2], [0, 1, 2, 2, 2], 3, ["A", "DC", "LC"])
    rep = ClassificationReport.from_confusion(cm, "multi", {"seed": 3})
    doc = rep.to_dict()
    assert list(doc) == ["task", "accuracy", "classes", "confusion_matrix", "config_fingerprint"]
    assert doc["confusion_matrix"] == [[1, 0, 0], [0, 1, 0], [0, 1, 2]]
    assert list(doc["classes"][0]) == ["name", "precision", "recall", "f1", "support", "zero_denominator_flags"]
    back = ClassificationReport.from_json(rep.to_json())
    assert back.to_dict() == doc
    assert cm.to_csv().splitlines()[0] == "actual\\predicted,A,DC,LC"
    assert cm.to_csv().splitlines()[3] == "LC,0,1,2"
    assert "accuracy 80.00%" in rep.display()
    assert rep.config_fingerprint == metrics.config_fingerprint({"seed": 3})
