"""Confusion matrices, macro metrics, the k-fold driver and paired t-tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from cvet.numerics import derive_seed
from cvet.text_pipeline import N_CLASSES, FoldAssignment

METRICS = ("accuracy", "macro_precision", "macro_recall", "macro_f1")


def confusion_matrix(predictions: Sequence[int], truths: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true label, columns = predicted label."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("predictions and truths differ in length")
    if pred.size and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= n_classes):
        raise ValueError(f"label codes must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return counts


def per_class_scores(confusion: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def metrics(confusion: np.ndarray) -> tuple[float, float, float, float]:
    """Accuracy and macro precision/recall/F1 over classes present in the truths.

    Zero denominators give 0 for that class's precision, recall or F1.
    """
    confusion = np.asarray(confusion)
    total = confusion.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    precision, recall, f1 = per_class_scores(confusion)
    present = confusion.sum(axis=1) > 0
    accuracy = np.trace(confusion) / total
    n = int(present.sum())
    # fsum is correctly rounded, so the result does not depend on summation order
    return (float(accuracy), math.fsum(precision[present]) / n, math.fsum(recall[present]) / n,
            math.fsum(f1[present]) / n)


@dataclass(frozen=True)
class FoldReport:
    fold_index: int
    confusion: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    test_indices: tuple[int, ...] = ()

    @classmethod
    def from_predictions(cls, fold: int, predictions, truths, test_indices=()) -> "FoldReport":
        cm = confusion_matrix(predictions, truths)
        return cls(fold, cm, *metrics(cm), tuple(int(i) for i in test_indices))

    def metric(self, name: str) -> float:
        return getattr(self, name)


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        self.fold = fold
        super().__init__(f"fold {fold}: {cause}")


# fit(train_indices, seed) -> predict(test_indices) -> predicted codes
Predictor = Callable[[np.ndarray], np.ndarray]
Trainer = Callable[[np.ndarray, int], Predictor]


def cross_validate(labels: Sequence[int], folds: FoldAssignment, fit: Trainer, base_seed: int = 0,
                   progress: Callable[[int], None] | None = None) -> list[FoldReport]:
    """Train on all folds but one, test on the held-out fold, for each fold in order."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(folds.assignment) != len(labels):
        raise ValueError("fold assignment does not cover the dataset")
    reports = []
    for fold in range(folds.k):
        train_idx, test_idx = folds.train_indices(fold), folds.test_indices(fold)
        try:
            predictor = fit(train_idx, derive_seed(base_seed, "fold", fold))
            predictions = np.asarray(predictor(test_idx), dtype=np.int64)
            reports.append(FoldReport.from_predictions(fold, predictions, labels[test_idx], test_idx))
        except Exception as exc:
            raise FoldError(fold, exc) from exc
        if progress is not None:
            progress(fold)
    return reports


# --- paired t-test ---------------------------------------------------------------


def _beta_continued_fraction(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    # Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    c, d = 1.0, 1.0 - (a + b) * x / (a + 1.0)
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        for num in (m * (b - m) * x / ((a + m2 - 1.0) * (a + m2)),
                    -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))):
            d = 1.0 + num * d
            d = 1.0 / (d if abs(d) > tiny else tiny)
            c = 1.0 + num / c
            c = c if abs(c) > tiny else tiny
            h *= d * c
        if abs(d * c - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_continued_fraction(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class SignificanceResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    label_a: str = "a"
    label_b: str = "b"
    degenerate: bool = False


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float], label_a: str = "a",
                  label_b: str = "b") -> SignificanceResult:
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length score lists with k >= 2")
    k = len(a)
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return SignificanceResult(0.0, k - 1, 1.0, label_a, label_b, degenerate=True)
        return SignificanceResult(math.copysign(math.inf, mean), k - 1, 0.0, label_a, label_b, degenerate=True)
    t = float(mean / (sd / math.sqrt(k)))
    return SignificanceResult(t, k - 1, student_t_two_sided_p(t, k - 1), label_a, label_b)
