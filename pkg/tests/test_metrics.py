import math

import numpy as np
import pytest

from imputad.errors import MetricsError
from imputad.metrics import (
    MAX_BUFFER,
    EventList,
    add_metric,
    continuous_labels,
    default_buffer,
    error_gap,
    evaluate_all,
    events_from_labels,
    point_adjust,
    prf1,
    range_auc,
)

TRUTH = np.array([0, 1, 1, 1, 0, 0, 1, 1, 0, 0])
PRED = np.array([0, 0, 1, 0, 0, 1, 0, 0, 0, 0])


def test_events_are_maximal_runs():
    events = events_from_labels(TRUTH)
    assert events.events == ((1, 4), (6, 8))
    assert events.lengths == [3, 2]
    assert len(events_from_labels(np.zeros(5, dtype=int))) == 0
    assert events_from_labels([1, 1, 0, 1]).events == ((0, 2), (3, 4))


def test_event_list_must_be_disjoint():
    with pytest.raises(MetricsError):
        EventList(((0, 5), (3, 7)))
    with pytest.raises(MetricsError):
        EventList(((4, 4),))


def test_point_adjust_credits_whole_events():
    np.testing.assert_array_equal(point_adjust(PRED, TRUTH), [0, 1, 1, 1, 0, 1, 0, 0, 0, 0])


def test_precision_recall_f1():
    p, r, f1 = prf1(PRED, TRUTH, adjust=True)
    assert (p, r) == pytest.approx((0.75, 0.6))
    assert f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)

    p, r, f1 = prf1(PRED, TRUTH, adjust=False)
    assert (p, r) == pytest.approx((0.5, 0.2))
    assert f1 == pytest.approx(2 * 0.1 / 0.7)


def test_no_positive_predictions():
    assert prf1(np.zeros(10, dtype=int), TRUTH) == (0.0, 0.0, 0.0)


def test_adjusted_f1_never_below_raw():
    rng = np.random.default_rng(0)
    for _ in range(20):
        truth = (rng.random(200) < 0.1).astype(int)
        pred = (rng.random(200) < 0.1).astype(int)
        assert prf1(pred, truth, adjust=True)[2] >= prf1(pred, truth, adjust=False)[2]


def test_input_validation():
    with pytest.raises(MetricsError, match="length mismatch"):
        prf1(np.zeros(3, dtype=int), np.zeros(4, dtype=int))
    with pytest.raises(MetricsError, match="binary"):
        prf1(np.array([0, 2]), np.array([0, 1]))


def test_continuous_labels_ramp():
    cont = continuous_labels([0, 0, 0, 1, 0, 0, 0], buffer=2)
    np.testing.assert_allclose(cont, [0, 1 / 3, 2 / 3, 1, 2 / 3, 1 / 3, 0])
    # overlapping ramps keep the maximum
    cont = continuous_labels([1, 0, 0, 1], buffer=2)
    np.testing.assert_allclose(cont, [1, 2 / 3, 2 / 3, 1])
    np.testing.assert_array_equal(continuous_labels(TRUTH, 0), TRUTH)


def test_default_buffer():
    assert default_buffer(EventList(((0, 4), (10, 20)))) == 3
    assert default_buffer(EventList(((0, 500),))) == MAX_BUFFER
    assert default_buffer(EventList()) == 0


def _mann_whitney(score, truth):
    pos, neg = score[truth == 1], score[truth == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _brute_pr_area(score, cont):
    points = []
    for threshold in sorted(set(score), reverse=True):
        flagged = score >= threshold
        tp = cont[flagged].sum()
        points.append((tp / cont.sum(), tp / flagged.sum()))
    recall = [0.0] + [r for r, _ in points]
    precision = [points[0][1]] + [p for _, p in points]
    return sum((recall[i] - recall[i - 1]) * (precision[i] + precision[i - 1]) / 2 for i in range(1, len(recall)))


class TestRangeAuc:
    def test_roc_without_buffer_matches_pairwise_ranking(self):
        rng = np.random.default_rng(1)
        truth = (rng.random(120) < 0.2).astype(int)
        # rounding creates ties
        score = np.round(rng.random(120) + 0.3 * truth, 1)
        assert range_auc(score, truth, buffer=0, kind="roc") == pytest.approx(_mann_whitney(score, truth))

    def test_pr_matches_brute_force_sweep(self):
        rng = np.random.default_rng(2)
        truth = np.zeros(150, dtype=int)
        truth[40:55] = 1
        truth[100:108] = 1
        score = np.round(rng.random(150) + 0.5 * truth, 2)
        cont = continuous_labels(truth, 4)
        assert range_auc(score, truth, buffer=4) == pytest.approx(_brute_pr_area(score, cont))

    def test_perfect_score(self):
        truth = np.array([0, 0, 1, 1, 0, 0])
        score = truth.astype(float)
        assert range_auc(score, truth, buffer=0, kind="pr") == pytest.approx(1.0)
        assert range_auc(score, truth, buffer=0, kind="roc") == pytest.approx(1.0)

    def test_constant_score_pr_is_the_positive_mass(self):
        truth = np.array([0, 0, 0, 1, 0, 0, 0, 0])
        cont = continuous_labels(truth, 2)
        assert range_auc(np.ones(8), truth, buffer=2) == pytest.approx(cont.sum() / 8)

    def test_undefined_without_events(self):
        with pytest.raises(MetricsError):
            range_auc(np.ones(5), np.zeros(5, dtype=int))
        with pytest.raises(MetricsError):
            range_auc(np.ones(5), np.ones(5, dtype=int), kind="roc")
        with pytest.raises(MetricsError):
            range_auc(np.ones(5), np.array([0, 1, 0, 0, 0]), kind="volume")


def test_detection_delay():
    events = events_from_labels(TRUTH)
    # first event flagged one step in, second never flagged (full length)
    assert add_metric(PRED, events) == pytest.approx((1 + 2) / 2)
    assert add_metric(TRUTH, events) == 0.0
    with pytest.raises(MetricsError):
        add_metric(PRED, EventList())


def test_error_gap():
    assert error_gap([1.0, 3.0, 5.0, 1.0], [0, 1, 1, 0]) == pytest.approx(3.0)
    with pytest.raises(MetricsError):
        error_gap([1.0, 2.0], [0, 0])


def test_evaluate_all():
    score = np.linspace(0, 1, 10) + TRUTH
    report = evaluate_all(PRED, TRUTH, score=score)

    assert report.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert report.f1_raw == pytest.approx(2 * 0.1 / 0.7)
    assert report.n_events == 2
    assert report.buffer == 1
    assert 0.0 < report.r_auc <= 1.0
    assert report.add == pytest.approx(1.5)
    assert report.gap == pytest.approx(error_gap(score, TRUTH))
    assert set(report.to_row()) == {"P", "R", "F1", "F1_raw", "R_AUC_PR", "R_AUC_ROC", "ADD", "GAP"}


def test_evaluate_all_without_events_reports_nan():
    report = evaluate_all(np.zeros(6, dtype=int), np.zeros(6, dtype=int))
    assert report.f1 == 0.0
    assert math.isnan(report.r_auc)
    assert math.isnan(report.add)
    assert math.isnan(report.gap)


def test_undefined_metrics_fail_one_at_a_time():
    truth = np.ones(8, dtype=int)
    pred = np.array([0, 0, 1, 1, 1, 1, 1, 1])
    report = evaluate_all(pred, truth, score=np.linspace(0.0, 1.0, 8))

    # a single event covering the series: no normal timestamps
    assert math.isnan(report.r_auc_roc)
    assert math.isnan(report.gap)
    assert 0.0 < report.r_auc <= 1.0
    assert report.add == pytest.approx(2.0)
