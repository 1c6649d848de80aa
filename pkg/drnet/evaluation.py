"""Confusion matrices, per-class and macro metrics, and the safety check."""
import logging
from dataclasses import dataclass

import numpy as np

from drnet.errors import InvalidArgument

log = logging.getLogger(__name__)

NUM_CLASSES = 5
STAGES = ('No DR', 'Mild', 'Moderate', 'Severe', 'PDR')


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts of (true, predicted) pairs, rows true class, columns predicted class.

    Args:
        counts (ndarray): int64 matrix of shape (5, 5)
    """
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (NUM_CLASSES, NUM_CLASSES) or np.any(counts < 0):
            raise InvalidArgument('A confusion matrix is a 5x5 matrix of non-negative counts.')
        object.__setattr__(self, 'counts', counts.astype(np.int64))

    @property
    def support(self):
        return self.counts.sum(axis=1)

    @property
    def total(self):
        return int(self.counts.sum())


def _check_classes(values, name):
    values = np.asarray(values)
    if values.ndim != 1 or (values.size and values.dtype.kind not in 'iu'):
        raise InvalidArgument(f'{name} must be a flat sequence of class indices.')
    if values.size and (values.min() < 0 or values.max() >= NUM_CLASSES):
        raise InvalidArgument(f'{name} contain classes outside 0-{NUM_CLASSES - 1}.')
    return values.astype(np.int64)


def confusion(preds, labels):
    """Builds the confusion matrix of predictions against labels.

    Args:
        preds (list): Predicted classes
        labels (list): True classes, same length

    Returns:
        ConfusionMatrix: The counts
    """
    preds, labels = _check_classes(preds, 'Predictions'), _check_classes(labels, 'Labels')
    if preds.shape != labels.shape:
        raise InvalidArgument(f'{preds.size} predictions for {labels.size} labels.')
    if preds.size == 0:
        raise InvalidArgument('Nothing to evaluate.')
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def merge_confusion(*matrices):
    """Sums partial confusion matrices."""
    if not matrices:
        raise InvalidArgument('Nothing to merge.')
    return ConfusionMatrix(sum(m.counts for m in matrices))


@dataclass(frozen=True)
class EvalReport:
    """Metrics of one confusion matrix.

    Args:
        matrix (ConfusionMatrix): The counts
        precision (ndarray): Per-class precision
        recall (ndarray): Per-class recall
        f1 (ndarray): Per-class F1
        macro_precision (float): Unweighted mean precision
        macro_recall (float): Unweighted mean recall
        macro_f1 (float): Unweighted mean F1
        accuracy (float): Trace over total
        critical_misdiagnoses (int): Stage 3 or 4 cases predicted as stage 0
    """
    matrix: ConfusionMatrix
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    critical_misdiagnoses: int


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=den > 0)


def metrics(cm):
    """Computes precision, recall, F1, their macro averages and accuracy.

    A zero denominator gives a metric of 0.

    Args:
        cm (ConfusionMatrix): The counts, total > 0

    Returns:
        EvalReport: The metrics
    """
    if cm.total == 0:
        raise InvalidArgument('Metrics of an empty confusion matrix are undefined.')
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    precision = _ratio(diag, counts.sum(axis=0))
    recall = _ratio(diag, counts.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    report = EvalReport(cm, precision, recall, f1, float(precision.mean()), float(recall.mean()),
                        float(f1.mean()), float(diag.sum() / counts.sum()), critical_misdiagnosis_count(cm))
    log.info('Evaluated %d images: accuracy %.4f, macro F1 %.4f, %d critical misdiagnoses', cm.total,
             report.accuracy, report.macro_f1, report.critical_misdiagnoses)
    return report


def critical_misdiagnosis_count(cm):
    """Stage-3 (severe NPDR) and stage-4 (PDR) cases predicted as no DR."""
    return int(cm.counts[3, 0] + cm.counts[4, 0])


def render_text(report, title='Evaluation'):
    """Renders the matrix grid and the per-class metric table.

    Args:
        report (EvalReport): The metrics
        title (string): Heading. Defaults to 'Evaluation'.

    Returns:
        string: Multi-line text
    """
    lines = [title, '', 'Confusion matrix (rows true, columns predicted)',
             '      ' + ''.join(f'{c:>7d}' for c in range(NUM_CLASSES))]
    for t in range(NUM_CLASSES):
        lines.append(f'{t:>6d}' + ''.join(f'{n:>7d}' for n in report.matrix.counts[t]))
    lines += ['', f'{"":<12}{"precision":>10}{"recall":>10}{"f1-score":>10}{"support":>10}']
    for c in range(NUM_CLASSES):
        lines.append(f'{c} {STAGES[c]:<10}{report.precision[c]:>10.2f}{report.recall[c]:>10.2f}'
                     f'{report.f1[c]:>10.2f}{report.matrix.support[c]:>10d}')
    lines += ['', f'{"Macro-avg":<12}{report.macro_precision:>10.2f}{report.macro_recall:>10.2f}'
                  f'{report.macro_f1:>10.2f}{report.matrix.total:>10d}',
              f'{"Accuracy":<12}{"":>20}{report.accuracy:>10.2f}{report.matrix.total:>10d}',
              '', f'Critical misdiagnoses (stage 3/4 predicted as 0): {report.critical_misdiagnoses}']
    return '\n'.join(lines) + '\n'


def report_to_dict(report):
    """JSON-ready rendering of a report."""
    return {
        'confusion': report.matrix.counts.tolist(),
        'support': report.matrix.support.tolist(),
        'precision': report.precision.tolist(),
        'recall': report.recall.tolist(),
        'f1': report.f1.tolist(),
        'macro_precision': report.macro_precision,
        'macro_recall': report.macro_recall,
        'macro_f1': report.macro_f1,
        'accuracy': report.accuracy,
        'critical_misdiagnoses': report.critical_misdiagnoses,
    }


def compare_reports(float_report, int8_report):
    """Metric differences ``int8 - float``, per class and overall.

    Returns:
        dict: Deltas of precision, recall, F1 (per class), macro F1 and accuracy
    """
    return {
        'precision': (int8_report.precision - float_report.precision).tolist(),
        'recall': (int8_report.recall - float_report.recall).tolist(),
        'f1': (int8_report.f1 - float_report.f1).tolist(),
        'macro_f1': int8_report.macro_f1 - float_report.macro_f1,
        'accuracy': int8_report.accuracy - float_report.accuracy,
        'critical_misdiagnoses': int8_report.critical_misdiagnoses - float_report.critical_misdiagnoses,
    }


def prediction_agreement(a, b):
    """Fraction of positions where two prediction vectors agree."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.size == 0:
        raise InvalidArgument('Agreement needs two nonempty prediction vectors of equal length.')
    return float(np.mean(a == b))
