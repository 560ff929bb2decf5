from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dynamics.validators import BoxExtentsValidator, ScoreRangeValidator

NOISE = -1


@dataclass(frozen=True)
class DynamicsConfig:
    lam: float = 1.0
    epsilon: float = 0.5
    window: int = 3
    eps: float = 0.8
    min_pts: int = 10
    score_scale: float = 2.0
    n_min: int = 20
    max_side: float = 15.0
    min_volume: float = 0.1
    max_volume: float = 120.0


@dataclass(frozen=True, eq=False)
class DynamicScoreField:
    """Оценки подвижности для отфильтрованных точек кадра.

    point_ids: номера точек в исходном облаке, scores идут в том же порядке.
    """

    scores: np.ndarray
    point_ids: np.ndarray
    frame: int
    window: int
    lam: float

    def __post_init__(self):
        ScoreRangeValidator()(self.scores)

    def __len__(self):
        return len(self.scores)

    def to_full(self, size):
        """Оценки для всех точек исходного облака; земля и выбросы получают 0."""
        full = np.zeros(size, dtype=np.float64)
        full[self.point_ids] = self.scores
        return full


@dataclass(frozen=True, eq=False)
class BoxInstance:
    """Ориентированный бокс: центр, курс γ ∈ [0, π), l ≥ w, h и члены кластера."""

    center: np.ndarray
    heading: float
    length: float
    width: float
    height: float
    point_ids: np.ndarray
    frame: int = 0

    def __post_init__(self):
        BoxExtentsValidator()(self.length, self.width, self.height)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "point_ids", np.asarray(self.point_ids, dtype=np.int64).reshape(-1))

    @property
    def volume(self):
        return self.length * self.width * self.height

    @property
    def extents(self):
        return np.array([self.length, self.width, self.height])

    @property
    def size(self):
        return len(self.point_ids)

    def corners_xy(self):
        c, s = math.cos(self.heading), math.sin(self.heading)
        half = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]]) * [self.length / 2, self.width / 2]
        rotation = np.array([[c, -s], [s, c]])
        return half @ rotation.T + self.center[:2]

    def aabb(self):
        """Осевой охватывающий параллелепипед: (min, max)."""
        corners = self.corners_xy()
        low = np.append(corners.min(axis=0), self.center[2] - self.height / 2)
        high = np.append(corners.max(axis=0), self.center[2] + self.height / 2)
        return low, high

    def contains(self, xyz, margin=1e-6):
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3) - self.center
        c, s = math.cos(self.heading), math.sin(self.heading)
        along = xyz[:, 0] * c + xyz[:, 1] * s
        across = -xyz[:, 0] * s + xyz[:, 1] * c
        return (
            (np.abs(along) <= self.length / 2 + margin)
            & (np.abs(across) <= self.width / 2 + margin)
            & (np.abs(xyz[:, 2]) <= self.height / 2 + margin)
        )

    def as_row(self):
        return [self.frame, *self.center, self.heading, self.length, self.width, self.height, self.size]
