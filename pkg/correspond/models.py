from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from django.core.exceptions import ValidationError

from preprocess.models import IcpConfig

DEFAULT_INTERVALS = (5, 10, 15, 20, 25, 30)


class PairKind(IntEnum):
    STATIC = 0
    DYNAMIC = 1


@dataclass(frozen=True)
class CorrespondConfig:
    static_max_dist: float = 0.3
    dynamic_max_dist: float = 0.5
    min_coverage: float = 0.2
    intervals: tuple = DEFAULT_INTERVALS
    icp: IcpConfig = field(default_factory=lambda: IcpConfig(max_corr_dist=1.0, tol=1e-5, max_iter=30))


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Пары точек между кадрами a и b в исходной нумерации точек кадров."""

    frame_a: int
    frame_b: int
    ids_a: np.ndarray
    ids_b: np.ndarray
    kinds: np.ndarray
    coverage: float = 0.0
    low_quality: bool = False

    def __post_init__(self):
        ids_a = np.asarray(self.ids_a, dtype=np.int64).reshape(-1)
        ids_b = np.asarray(self.ids_b, dtype=np.int64).reshape(-1)
        kinds = np.asarray(self.kinds, dtype=np.uint8).reshape(-1)
        if not len(ids_a) == len(ids_b) == len(kinds):
            raise ValidationError("Длины массивов соответствий не совпадают.")
        if len(np.unique(ids_a)) != len(ids_a):
            raise ValidationError("Точка кадра a встречается в соответствиях больше одного раза.")
        object.__setattr__(self, "ids_a", ids_a)
        object.__setattr__(self, "ids_b", ids_b)
        object.__setattr__(self, "kinds", kinds)

    def __len__(self):
        return len(self.ids_a)

    def of_kind(self, kind):
        return self.kinds == kind

    @classmethod
    def empty(cls, frame_a, frame_b):
        return cls(frame_a, frame_b, np.empty(0), np.empty(0), np.empty(0), 0.0, True)
