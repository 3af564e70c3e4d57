"""Confusion matrices and the UA / WA / macro-F1 scores."""

import warnings

import numpy as np


class EmptyConfusionError(ValueError):
    pass


def confusion(true, pred, num_classes):
    """Counts with rows = true class, columns = predicted class."""
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise ValueError("true and predicted label lists differ in length")
    for arr in (true, pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"label out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def _check(cm):
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise EmptyConfusionError("confusion matrix is empty")
    return cm


def recalls(cm):
    cm = _check(cm)
    support = cm.sum(axis=1)
    if np.any(support == 0):
        warnings.warn("class with no true samples: its recall is taken as 0", RuntimeWarning)
    diag = np.diag(cm).astype(np.float64)
    return np.divide(diag, support, out=np.zeros_like(diag), where=support > 0)


def ua(cm) -> float:
    """Unweighted accuracy: mean per-class recall."""
    return float(recalls(cm).mean())


def wa(cm) -> float:
    """Weighted accuracy: overall fraction correct."""
    cm = _check(cm)
    return float(np.trace(cm) / cm.sum())


def f1_scores(cm):
    cm = _check(cm)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    # F1 = 2TP / (2TP + FP + FN); 0/0 counts as 0
    return np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(cm) -> float:
    return float(f1_scores(cm).mean())


def scores(cm):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return {"UA": ua(cm), "WA": wa(cm), "F1": macro_f1(cm)}
