from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgelora.errors import DataError
from edgelora.metrics import confusion_matrix, metrics_from_confusion, score


def hand_metrics(truth, pred, labels):
    """Per-class counts by direct enumeration, exact rational arithmetic."""
    n = len(truth)
    acc = Fraction(sum(t == p for t, p in zip(truth, pred)), n)
    ps, rs, fs = [], [], []
    for c in labels:
        tp = sum(t == c and p == c for t, p in zip(truth, pred))
        fp = sum(t != c and p == c for t, p in zip(truth, pred))
        fn = sum(t == c and p != c for t, p in zip(truth, pred))
        p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f = 2 * p * r / (p + r) if p + r else Fraction(0)
        ps.append(p)
        rs.append(r)
        fs.append(f)
    k = len(labels)
    return float(acc), float(sum(ps) / k), float(sum(rs) / k), float(sum(fs) / k)


def test_all_correct():
    m = score([0, 1, 2, 2], [0, 1, 2, 2])
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_three_class_hand_confusion():
    # diagonal (10, 8, 9); errors 0->1: 2, 1->2: 1, 2->0: 1
    cm = np.array([[10, 2, 0], [0, 8, 1], [1, 0, 9]])
    truth = [i for i in range(3) for j in range(3) for _ in range(cm[i, j])]
    pred = [j for i in range(3) for j in range(3) for _ in range(cm[i, j])]
    m = score(truth, pred)
    np.testing.assert_array_equal(m.confusion, cm)
    p = [10 / 11, 8 / 10, 9 / 10]
    r = [10 / 12, 8 / 9, 9 / 10]
    f = [2 * a * b / (a + b) for a, b in zip(p, r)]
    assert m.accuracy == pytest.approx(27 / 31, abs=1e-15)
    assert m.precision == pytest.approx(sum(p) / 3, abs=1e-15)
    assert m.recall == pytest.approx(sum(r) / 3, abs=1e-15)
    assert m.f1 == pytest.approx(sum(f) / 3, abs=1e-15)


def test_absent_class_contributes_zero():
    m = score([0, 0, 1], [0, 0, 1], labels=[0, 1, 2])
    assert m.f1 == pytest.approx(2 / 3) and m.precision == pytest.approx(2 / 3)
    assert m.accuracy == 1.0


def test_class_never_predicted_has_zero_precision():
    m = score([0, 1, 1], [0, 0, 0], labels=[0, 1])
    assert m.precision == pytest.approx((1 / 3 + 0) / 2)
    assert m.recall == pytest.approx((1 + 0) / 2)


def test_empty_set_is_data_error():
    with pytest.raises(DataError):
        score([], [])


@given(st.integers(1, 5).flatmap(lambda k: st.tuples(
    st.just(k),
    st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=40))))
def test_metrics_match_enumeration(case):
    k, pairs = case
    truth, pred = [t for t, _ in pairs], [p for _, p in pairs]
    labels = list(range(k))
    m = score(truth, pred, labels=labels)
    expected = hand_metrics(truth, pred, labels)
    assert (m.accuracy, m.precision, m.recall, m.f1) == pytest.approx(expected, abs=1e-12)
    for v in (m.accuracy, m.precision, m.recall, m.f1):
        assert 0.0 <= v <= 1.0
    # the stored confusion matrix alone reproduces the report
    again = metrics_from_confusion(m.confusion, m.classes, m.labels)
    assert again == (m.accuracy, m.precision, m.recall, m.f1)


def test_confusion_rows_are_truth():
    cm = confusion_matrix([0, 0, 1], [1, 1, 1], classes=[0, 1])
    assert cm.tolist() == [[0, 2], [0, 1]]
