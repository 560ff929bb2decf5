from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

from cloud.exceptions import LabelMismatchError


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Счётчики K_pred x C_true: строка: кластер, столбец: истинный класс."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2:
            raise ValidationError("Матрица ошибок должна быть двумерной.")
        if (counts < 0).any():
            raise ValidationError("Счётчики матрицы ошибок не могут быть отрицательными.")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def zeros(cls, clusters, classes):
        return cls(np.zeros((clusters, classes), dtype=np.int64))

    @property
    def clusters(self):
        return self.counts.shape[0]

    @property
    def classes(self):
        return self.counts.shape[1]

    @property
    def total(self):
        return int(self.counts.sum())

    def merge(self, other):
        if self.counts.shape != other.counts.shape:
            raise LabelMismatchError(f"нельзя объединить матрицы {self.counts.shape} и {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts)
