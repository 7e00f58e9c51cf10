import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emgup.metrics import UndefinedMetricError, accuracy, confusion_matrix, macro_f1, per_class_f1


def brute_force(cm):
    """Per-class precision/recall/F1 by explicit loops over entries."""
    k = len(cm)
    total = correct = 0
    f1s = []
    for c in range(k):
        tp = fp = fn = 0
        for i in range(k):
            for j in range(k):
                n = int(cm[i][j])
                if c == 0:
                    total += n
                    correct += n if i == j else 0
                if i == c and j == c:
                    tp += n
                elif j == c:
                    fp += n
                elif i == c:
                    fn += n
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return correct / total, sum(f1s) / k


def test_worked_example():
    cm = np.array([[1, 1], [0, 2]])
    assert accuracy(cm) == 0.75
    np.testing.assert_allclose(per_class_f1(cm), [2 / 3, 0.8], atol=1e-15)
    assert macro_f1(cm) == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-15)
    assert macro_f1(cm) == pytest.approx(0.7333, abs=1e-4)


def test_diagonal_is_perfect():
    cm = np.diag([3, 1, 7])
    assert accuracy(cm) == 1.0 and macro_f1(cm) == 1.0


def test_zero_support_class_scores_zero():
    cm = np.array([[4, 0, 0], [0, 2, 0], [0, 0, 0]])
    np.testing.assert_array_equal(per_class_f1(cm), [1.0, 1.0, 0.0])
    assert macro_f1(cm) == pytest.approx(2 / 3)


def test_empty_matrix_is_undefined():
    with pytest.raises(UndefinedMetricError):
        accuracy(np.zeros((3, 3), dtype=int))
    with pytest.raises(UndefinedMetricError):
        macro_f1(np.zeros((3, 3), dtype=int))


def test_confusion_counts_and_range():
    cm = confusion_matrix([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 0, 2], 3)
    np.testing.assert_array_equal(cm, [[1, 1, 0], [0, 1, 0], [1, 0, 2]])
    with pytest.raises(ValueError):
        confusion_matrix([0, 3], [0, 0], 3)
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0, -1], 3)


def test_thousand_random_matrices_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        cm = rng.integers(0, 20, size=(k, k))
        if rng.random() < 0.2:
            cm[int(rng.integers(k))] = 0
        if cm.sum() == 0:
            cm[0, 0] = 1
        acc, mf1 = brute_force(cm.tolist())
        assert abs(accuracy(cm) - acc) < 1e-12
        assert abs(macro_f1(cm) - mf1) < 1e-12


def test_uniform_random_predictor_near_chance():
    rng = np.random.default_rng(1)
    y = np.repeat(np.arange(5), 4000)
    cm = confusion_matrix(y, rng.integers(0, 5, size=y.size), 5)
    assert accuracy(cm) == pytest.approx(0.2, abs=0.01)


@given(arrays(np.int64, st.tuples(st.just(4), st.just(4)), elements=st.integers(0, 50)), st.permutations(range(4)))
def test_invariant_under_class_relabeling(cm, perm):
    if cm.sum() == 0:
        return
    p = np.array(perm)
    shuffled = cm[np.ix_(p, p)]
    assert accuracy(shuffled) == pytest.approx(accuracy(cm), abs=1e-15)
    assert macro_f1(shuffled) == pytest.approx(macro_f1(cm), abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=200))
def test_total_equals_sample_count(pairs):
    y, p = zip(*pairs)
    cm = confusion_matrix(y, p, 5)
    assert cm.sum() == len(pairs) and (cm >= 0).all()
    assert 0.0 <= macro_f1(cm) <= 1.0
