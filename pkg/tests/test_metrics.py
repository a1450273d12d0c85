import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from roteqnet.metrics import accumulate, confusion_matrix, report_csv, report_table, scores


def test_empty_input_leaves_matrix_unchanged():
    cm = confusion_matrix(3)
    assert np.array_equal(accumulate(cm, np.array([], int), np.array([], int)), cm)


def test_all_correct_is_diagonal():
    y = np.array([0, 1, 2, 2, 1])
    cm = accumulate(confusion_matrix(3), y, y)
    assert np.array_equal(cm, np.diag([1, 2, 2]))


def test_halves_add_up():
    rng = np.random.default_rng(0)
    y, p = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
    full = accumulate(confusion_matrix(4), y, p)
    halves = accumulate(accumulate(confusion_matrix(4), y[:50], p[:50]), y[50:], p[50:])
    assert np.array_equal(full, halves)
    assert full.sum() == 100


def test_ignored_pixels_and_range_checks():
    cm = accumulate(confusion_matrix(2), np.array([0, 255, 1]), np.array([0, 1, 1]), ignore_id=255)
    assert cm.sum() == 2
    with pytest.raises(ValueError):
        accumulate(confusion_matrix(2), np.array([2]), np.array([0]))
    with pytest.raises(ValueError):
        accumulate(confusion_matrix(2), np.array([0]), np.array([-1]))


def test_perfect_prediction_scores():
    r = scores(np.diag([5, 3, 7]))
    assert np.all(r["f1"] == 1) and r["oa"] == r["aa"] == r["kappa"] == 1


def test_constant_prediction_on_balanced_set():
    r = scores(np.array([[10, 0], [10, 0]]))
    assert r["oa"] == 0.5 and r["kappa"] == 0.0


def test_f1_closed_form():
    # class 0: TP 8, FP 2, FN 2
    r = scores(np.array([[8, 2], [2, 0]]))
    assert r["f1"][0] == pytest.approx(0.8)


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        scores(confusion_matrix(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_scores_match_sklearn(seed, c):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, c, 300)
    p = np.where(rng.random(300) < 0.6, y, rng.integers(0, c, 300))
    r = scores(accumulate(confusion_matrix(c), y, p))
    labels = list(range(c))
    assert np.array_equal(accumulate(confusion_matrix(c), y, p), skm.confusion_matrix(y, p, labels=labels))
    np.testing.assert_allclose(r["f1"], skm.f1_score(y, p, labels=labels, average=None, zero_division=0), atol=1e-12)
    assert r["oa"] == pytest.approx(skm.accuracy_score(y, p))
    assert r["kappa"] == pytest.approx(skm.cohen_kappa_score(y, p))
    present = np.unique(y)
    recall = skm.recall_score(y, p, labels=present, average=None, zero_division=0)
    assert r["aa"] == pytest.approx(recall.mean())


def test_reports():
    r = scores(np.array([[8, 2], [2, 8]]))
    csv_text = report_csv(r, ["a", "b"])
    assert csv_text.splitlines()[0] == "metric,value"
    assert "f1_a,0.800000" in csv_text and "kappa,0.600000" in csv_text
    table = report_table(r, ["a", "b"])
    assert "OA" in table and "80.00" in table
