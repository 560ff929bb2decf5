from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError

from cloud.models import KdIndex, RigidTransform


@dataclass(frozen=True)
class GroundConfig:
    height_gate: float = 0.5
    ground_dist_thresh: float = 0.2
    iterations: int = 100
    max_normal_angle_deg: float = 30.0
    seed: int = 0


@dataclass(frozen=True)
class SorConfig:
    k: int = 8
    stddev_mult: float = 1.0


@dataclass(frozen=True)
class IcpConfig:
    max_corr_dist: float = 1.0
    tol: float = 1e-4
    max_iter: int = 50


@dataclass(frozen=True)
class AlignConfig:
    ground: GroundConfig = field(default_factory=GroundConfig)
    sor: SorConfig = field(default_factory=SorConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    min_points: int = 10


@dataclass(frozen=True, eq=False)
class GroundPlane:
    """Плоскость земли n·p + offset = 0, нормаль единичная и смотрит вверх."""

    normal: np.ndarray
    offset: float
    support: int = 0

    def signed_height(self, xyz):
        return np.asarray(xyz) @ self.normal + self.offset

    def distance(self, xyz):
        return np.abs(self.signed_height(xyz))

    def as_array(self):
        return np.append(self.normal, self.offset)

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if not np.isfinite(values).all():
            return None
        return cls(values[:3], float(values[3]))


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    residual: float
    converged: bool
    iterations: int = 0
    history: tuple = ()


@dataclass(frozen=True, eq=False)
class AlignedSequence:
    """Последовательность, выровненная к первому кадру.

    clouds: облака без земли и выбросов (в системе сенсора), poses[t] переводит кадр t
    в систему кадра 0; маски заданы в исходной нумерации точек.
    """

    originals: tuple
    clouds: tuple
    poses: tuple
    ground_masks: tuple
    keep_masks: tuple
    planes: tuple = ()
    valid: tuple = ()
    residuals: tuple = ()

    def __post_init__(self):
        if len(self.poses) != len(self.clouds):
            raise ValidationError("Число поз не совпадает с числом кадров.")
        if self.poses and not np.allclose(self.poses[0].as_matrix(), np.eye(4)):
            raise ValidationError("Поза первого кадра должна быть единичной.")
        if not self.valid:
            object.__setattr__(self, "valid", tuple(True for _ in self.clouds))
        object.__setattr__(self, "_indexes", {})
        object.__setattr__(self, "_index_lock", threading.Lock())

    def __len__(self):
        return len(self.clouds)

    def aligned(self, t):
        """Отфильтрованные точки кадра t в системе кадра 0."""
        return self.poses[t].apply(self.clouds[t].xyz)

    def aligned_original(self, t):
        return self.poses[t].apply(self.originals[t].xyz)

    def correspondence_mask(self, t):
        """Точки для поиска соответствий: оставленные фильтром плюс земля."""
        return self.keep_masks[t] | self.ground_masks[t]

    def index(self, t):
        """KdIndex выровненных точек кадра t; строится один раз, вызов безопасен из потоков."""
        with self._index_lock:
            if t not in self._indexes:
                self._indexes[t] = KdIndex(self.aligned(t))
            return self._indexes[t]
