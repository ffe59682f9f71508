"""Confusion-matrix bookkeeping and the kappa agreement coefficient."""

import numpy as np

from .errors import ContractError, NumericError


class ConfusionMatrix:
    """C x C integer counts; rows are true classes, columns predictions."""

    def __init__(self, n_classes):
        if n_classes < 2:
            raise ContractError(f"confusion matrix needs >= 2 classes, got {n_classes}")
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    @classmethod
    def from_counts(cls, counts):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ContractError(f"counts must be square, got shape {counts.shape}")
        if (counts < 0).any():
            raise ContractError("counts must be nonnegative")
        cm = cls(counts.shape[0])
        cm.counts[...] = counts
        return cm

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def add(self, true_class, predicted_class):
        self.counts[true_class, predicted_class] += 1

    def true_counts(self):
        return self.counts.sum(axis=1)

    def predicted_counts(self):
        return self.counts.sum(axis=0)

    def accuracy(self):
        if self.total == 0:
            raise ContractError("empty confusion matrix has no accuracy")
        return float(np.trace(self.counts)) / self.total

    def __repr__(self):
        return f"ConfusionMatrix({self.counts.tolist()})"


def kappa(cm):
    """Chance-corrected agreement: (p_o - p_e) / (1 - p_e), in [-1, 1].

    p_o is plain accuracy; p_e sums the per-class products of true and
    predicted counts over n^2. A p_e of exactly 1 leaves kappa undefined and
    raises instead of silently returning 0.
    """
    n = cm.total
    if n == 0:
        raise ContractError("kappa needs a nonempty confusion matrix")
    p_o = float(np.trace(cm.counts)) / n
    p_e = float(cm.true_counts() @ cm.predicted_counts()) / (n * n)
    if p_e == 1.0:
        raise NumericError("kappa undefined: expected agreement is exactly 1")
    return (p_o - p_e) / (1.0 - p_e)
