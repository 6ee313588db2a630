import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from casskit.errors import CassValidationError, UndefinedMetricError
from casskit.metrics import (
    ConfusionCounts, balanced_accuracy, confusion_counts, confusion_matrix, f1_score, metric_report,
    multilabel_counts, per_class_recall,
)
from oracles import balanced_accuracy_by_counting, macro_f1_by_counting


@st.composite
def labelled(draw):
    k = draw(st.integers(2, 6))
    n = draw(st.integers(1, 60))
    labels = st.lists(st.integers(0, k - 1), min_size=n, max_size=n)
    return draw(labels), draw(labels), k


@settings(max_examples=300, deadline=None)
@given(labelled())
def test_macro_f1_and_balanced_accuracy_match_counting(data):
    y, p, k = data
    c = confusion_counts(y, p, k)
    assert f1_score(c) == pytest.approx(macro_f1_by_counting(y, p, k), abs=1e-12)
    assert balanced_accuracy(c) == pytest.approx(balanced_accuracy_by_counting(y, p, k), abs=1e-12)
    assert balanced_accuracy(c) == float(per_class_recall(c)[0].mean())
    assert 0 <= f1_score(c) <= 1


def test_worked_example():
    y = [0, 0, 0, 1, 1, 2]
    p = [0, 0, 1, 1, 2, 2]
    cm = confusion_matrix(y, p, 3)
    np.testing.assert_array_equal(cm, [[2, 1, 0], [0, 1, 1], [0, 0, 1]])
    c = ConfusionCounts.from_matrix(cm)
    # per-class F1: 4/5, 2/4, 2/3
    assert f1_score(c) == pytest.approx((0.8 + 0.5 + 2 / 3) / 3, abs=1e-12)
    assert balanced_accuracy(c) == pytest.approx((2 / 3 + 0.5 + 1) / 3, abs=1e-12)
    assert f1_score(c, "micro") == pytest.approx(4 / 6)


def test_zero_denominator_is_flagged_not_nan():
    rep = metric_report(confusion_counts([0, 0, 1], [0, 0, 1], 3))
    assert rep.flagged_classes == [2]
    assert rep.per_class_f1[2] == 0.0 and np.isfinite(rep.f1)
    assert rep.n == 3


def test_all_zero_counts_is_undefined():
    z = np.zeros(3, np.int64)
    with pytest.raises(UndefinedMetricError):
        f1_score(ConfusionCounts(z, z, z, z))
    with pytest.raises(UndefinedMetricError):
        balanced_accuracy(ConfusionCounts.from_matrix(np.zeros((2, 2))))


def test_input_validation():
    with pytest.raises(CassValidationError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(CassValidationError):
        confusion_matrix([0, 3], [0, 1], 2)
    with pytest.raises(CassValidationError):
        ConfusionCounts([1], [-1], [0], [0])
    with pytest.raises(CassValidationError):
        f1_score(confusion_counts([0], [0], 2), "weighted")


def test_multilabel_counts_per_class():
    t = np.array([[1, 0], [1, 1], [0, 1]])
    p = np.array([[1, 1], [0, 1], [0, 1]])
    c = multilabel_counts(t, p)
    np.testing.assert_array_equal(c.tp, [1, 2])
    np.testing.assert_array_equal(c.fp, [0, 1])
    np.testing.assert_array_equal(c.fn, [1, 0])
    np.testing.assert_array_equal(c.tn, [1, 0])
    assert metric_report(c).to_record()["type"] == "metrics"
