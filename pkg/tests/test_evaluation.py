import logging

import numpy as np
import pytest

from drnet.errors import InvalidArgument
from drnet.evaluation import (ConfusionMatrix, compare_reports, confusion, critical_misdiagnosis_count,
                              merge_confusion, metrics, prediction_agreement, render_text, report_to_dict)


def two_class_matrix():
    counts = np.zeros((5, 5), dtype=np.int64)
    counts[0, 0], counts[0, 1], counts[1, 0], counts[1, 1] = 8, 2, 1, 9
    return ConfusionMatrix(counts)


def test_hand_computed_metrics():
    report = metrics(two_class_matrix())
    assert report.precision[0] == pytest.approx(8 / 9)
    assert report.recall[0] == pytest.approx(0.8)
    assert report.f1[0] == pytest.approx(0.842, abs=1e-3)
    assert report.precision[1] == pytest.approx(9 / 11)
    assert report.recall[1] == pytest.approx(0.9)
    assert report.accuracy == pytest.approx(17 / 20)
    assert report.precision[2:].tolist() == [0, 0, 0]
    assert report.macro_f1 == pytest.approx(report.f1.sum() / 5)


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 3, 4, 4])
    report = metrics(confusion(labels, labels))
    assert report.accuracy == 1.0
    assert report.macro_f1 == pytest.approx(1.0)
    assert report.critical_misdiagnoses == 0


def test_confusion_orientation():
    cm = confusion([0, 0, 2], [3, 4, 4])
    assert cm.counts[3, 0] == 1 and cm.counts[4, 0] == 1 and cm.counts[4, 2] == 1
    assert cm.support.tolist() == [0, 0, 0, 1, 2]
    assert cm.total == 3


def test_critical_misdiagnoses():
    preds = [0, 0, 0, 0, 3]
    labels = [3, 4, 4, 0, 3]
    assert critical_misdiagnosis_count(confusion(preds, labels)) == 3
    assert metrics(confusion(preds, labels)).critical_misdiagnoses == 3


def test_merge_matches_whole():
    rng = np.random.default_rng(0)
    preds, labels = rng.integers(0, 5, 300), rng.integers(0, 5, 300)
    whole = confusion(preds, labels)
    parts = merge_confusion(confusion(preds[:100], labels[:100]), confusion(preds[100:], labels[100:]))
    np.testing.assert_array_equal(whole.counts, parts.counts)
    with pytest.raises(InvalidArgument):
        merge_confusion()


def test_sample_order_does_not_matter():
    rng = np.random.default_rng(1)
    preds, labels = rng.integers(0, 5, 50), rng.integers(0, 5, 50)
    order = rng.permutation(50)
    a, b = metrics(confusion(preds, labels)), metrics(confusion(preds[order], labels[order]))
    np.testing.assert_array_equal(a.matrix.counts, b.matrix.counts)
    assert a.macro_f1 == b.macro_f1


@pytest.mark.parametrize('preds, labels', [
    ([0, 1], [0]),
    ([], []),
    ([0, 5], [0, 1]),
    ([0.5], [0]),
    ([[0]], [[0]]),
])
def test_confusion_rejects(preds, labels):
    with pytest.raises(InvalidArgument):
        confusion(preds, labels)


def test_empty_matrix_has_no_metrics():
    with pytest.raises(InvalidArgument):
        metrics(ConfusionMatrix(np.zeros((5, 5))))
    with pytest.raises(InvalidArgument):
        ConfusionMatrix(np.zeros((4, 4)))


def test_render_text():
    text = render_text(metrics(two_class_matrix()), 'Test set')
    assert text.startswith('Test set\n')
    assert '0 No DR' in text and '4 PDR' in text
    assert 'Critical misdiagnoses (stage 3/4 predicted as 0): 0' in text
    assert '      0.89      0.80      0.84        10' in text


def test_report_dict_and_comparison():
    float_report = metrics(two_class_matrix())
    int8_report = metrics(confusion([0, 0, 0], [0, 1, 3]))
    data = report_to_dict(float_report)
    assert data['confusion'][0][:2] == [8, 2]
    assert data['support'] == [10, 10, 0, 0, 0]
    delta = compare_reports(float_report, int8_report)
    assert delta['accuracy'] == pytest.approx(1 / 3 - 0.85)
    assert delta['critical_misdiagnoses'] == 1
    assert len(delta['f1']) == 5


def test_prediction_agreement():
    assert prediction_agreement([0, 1, 2, 3], [0, 1, 2, 4]) == 0.75
    with pytest.raises(InvalidArgument):
        prediction_agreement([0], [0, 1])


def test_macro_f1_is_invariant_to_class_relabeling():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 5, size=80)
    preds = np.where(rng.random(80) < 0.6, labels, rng.integers(0, 5, size=80))
    relabel = np.array([3, 0, 4, 1, 2])
    a, b = metrics(confusion(preds, labels)), metrics(confusion(relabel[preds], relabel[labels]))
    assert b.macro_f1 == pytest.approx(a.macro_f1, abs=1e-12)
    assert b.accuracy == a.accuracy
    np.testing.assert_allclose(b.f1[relabel], a.f1, atol=1e-12)


def test_metrics_logs_totals(caplog):
    with caplog.at_level(logging.INFO, logger='drnet.evaluation'):
        metrics(two_class_matrix())
    assert 'Evaluated 20 images: accuracy 0.8500' in caplog.text
