from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from cloud.validators import (
    FiniteCoordinatesValidator,
    FovValidator,
    NonNegativeValidator,
    RotationMatrixValidator,
    SameLengthValidator,
)

INVALID_FILL = -1.0
CHANNELS = ("x", "y", "z", "intensity", "range")

# Сколько соседей запрашивать сразу; если все они равноудалены, ничья добирается поиском в шаре
TIE_CANDIDATES = 4


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Облако точек одного кадра: координаты в метрах, интенсивность, номер кадра."""

    xyz: np.ndarray
    intensity: np.ndarray
    frame_index: int = 0
    point_ids: np.ndarray | None = None
    dropped: int = 0

    def __post_init__(self):
        xyz = _frozen(np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3), np.float64)
        intensity = _frozen(np.asarray(self.intensity, dtype=np.float64).reshape(-1), np.float64)
        SameLengthValidator("xyz", "intensity")(xyz, intensity)
        FiniteCoordinatesValidator("xyz")(xyz)
        NonNegativeValidator("frame_index")(self.frame_index)
        if self.point_ids is None:
            ids = np.arange(len(xyz), dtype=np.int64)
        else:
            ids = np.asarray(self.point_ids, dtype=np.int64).reshape(-1)
            SameLengthValidator("xyz", "point_ids")(xyz, ids)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", intensity)
        object.__setattr__(self, "point_ids", _frozen(ids, np.int64))

    @classmethod
    def from_points(cls, points, frame_index=0):
        rows = np.array([tuple(p) for p in points], dtype=np.float64).reshape(-1, 4)
        return cls(rows[:, :3], rows[:, 3], frame_index=frame_index)

    @classmethod
    def empty(cls, frame_index=0):
        return cls(np.empty((0, 3)), np.empty(0), frame_index=frame_index)

    def __len__(self):
        return self.xyz.shape[0]

    @property
    def ranges(self):
        return np.linalg.norm(self.xyz, axis=1)

    def point(self, index):
        x, y, z = self.xyz[index]
        return Point(float(x), float(y), float(z), float(self.intensity[index]))

    def subset(self, selector):
        """Подмножество точек; point_ids сохраняют исходную нумерацию."""
        return PointCloud(
            self.xyz[selector],
            self.intensity[selector],
            frame_index=self.frame_index,
            point_ids=self.point_ids[selector],
        )

    def transformed(self, transform):
        return PointCloud(
            transform.apply(self.xyz),
            self.intensity,
            frame_index=self.frame_index,
            point_ids=self.point_ids,
        )


@dataclass(frozen=True)
class SensorFov:
    """Вертикальный угол обзора сенсора, радианы (оба значения положительные)."""

    f_up: float
    f_down: float

    def __post_init__(self):
        FovValidator()(self.f_up, self.f_down)

    @classmethod
    def from_degrees(cls, up, down):
        return cls(math.radians(abs(up)), math.radians(abs(down)))

    @property
    def total(self):
        return self.f_up + self.f_down


class SensorPreset(NamedTuple):
    height: int
    width: int
    fov: SensorFov


SENSOR_PRESETS = {
    "kitti": SensorPreset(64, 1024, SensorFov.from_degrees(3.0, 25.0)),
    "poss": SensorPreset(40, 1800, SensorFov.from_degrees(7.0, 16.0)),
    "synthetic": SensorPreset(64, 1024, SensorFov.from_degrees(20.0, 25.0)),
}


@dataclass(frozen=True, eq=False)
class RangeImage:
    """Сферическая проекция H x W x 5 (x, y, z, intensity, r) и карта пиксель -> точка."""

    data: np.ndarray
    valid_mask: np.ndarray
    point_index: np.ndarray
    point_pixels: np.ndarray
    owned: int = 0
    occluded: int = 0
    skipped: int = 0
    dropped_out_of_fov: int = 0

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape[:2]

    def channel(self, name):
        return self.data[..., CHANNELS.index(name)]

    def owner_pixels(self):
        """Плоский индекс пикселя для каждой точки, если точка им владеет, иначе -1."""
        pixels = self.point_pixels.copy()
        has_pixel = pixels >= 0
        owners = self.point_index.reshape(-1)[pixels[has_pixel]]
        lost = owners != np.flatnonzero(has_pixel)
        pixels[np.flatnonzero(has_pixel)[lost]] = -1
        return pixels


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Поза SE(3): поворот 3x3 и перенос в метрах."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = _frozen(np.asarray(self.rotation, dtype=np.float64), np.float64)
        translation = _frozen(np.asarray(self.translation, dtype=np.float64).reshape(3), np.float64)
        RotationMatrixValidator()(rotation)
        FiniteCoordinatesValidator("translation")(translation)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0)):
        return cls(Rotation.from_euler("z", yaw).as_matrix(), translation)

    @classmethod
    def from_kitti_row(cls, values):
        values = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(_orthonormalize(values[:, :3]), values[:, 3])

    def as_matrix(self):
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def to_kitti_row(self):
        return self.as_matrix()[:3, :].reshape(-1)

    def apply(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def compose(self, other):
        """self ∘ other: сначала other, затем self."""
        return RigidTransform(
            _orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    @property
    def yaw(self):
        return float(math.atan2(self.rotation[1, 0], self.rotation[0, 0]))

    def rotation_angle_deg(self):
        return float(np.degrees(Rotation.from_matrix(self.rotation).magnitude()))

    def error_to(self, other):
        """(угол, м) между двумя позами."""
        delta = other.inverse().compose(self)
        return delta.rotation_angle_deg(), float(np.linalg.norm(self.translation - other.translation))


def _orthonormalize(rotation):
    u, _, vt = np.linalg.svd(rotation)
    result = u @ vt
    if np.linalg.det(result) < 0:
        u[:, -1] *= -1
        result = u @ vt
    return result


@dataclass(frozen=True, eq=False)
class KdIndex:
    """Сбалансированное 3-D дерево поверх облака, только для чтения."""

    points: np.ndarray
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        points = _frozen(np.asarray(self.points, dtype=np.float64).reshape(-1, 3), np.float64)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "tree", cKDTree(points, balanced_tree=True))

    @classmethod
    def build(cls, cloud):
        xyz = cloud.xyz if isinstance(cloud, PointCloud) else cloud
        return cls(xyz)

    @property
    def size(self):
        return self.points.shape[0]

    def query(self, queries, distance_upper_bound=np.inf):
        """Ближайший сосед для каждого запроса; при равенстве берётся меньший индекс.

        Возвращает (расстояния, индексы); индекс -1, если соседа нет в пределах границы.
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if self.size == 0 or len(queries) == 0:
            return np.full(len(queries), np.inf), np.full(len(queries), -1, dtype=np.int64)
        k = min(TIE_CANDIDATES, self.size)
        dist, idx = self.tree.query(queries, k=k, distance_upper_bound=distance_upper_bound)
        dist = np.asarray(dist).reshape(len(queries), k)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(queries), k)
        tied = dist == dist[:, :1]
        best = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
        best[~np.isfinite(dist[:, 0])] = -1
        # все k кандидатов на одном расстоянии: равных соседей может быть больше
        saturated = tied.all(axis=1) & np.isfinite(dist[:, 0]) & (k < self.size)
        for row in np.flatnonzero(saturated):
            best[row] = self._lowest_nearest(queries[row], dist[row, 0])
        return dist[:, 0].copy(), best

    def _lowest_nearest(self, query, radius):
        candidates = np.asarray(self.tree.query_ball_point(query, r=radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
        gaps = np.linalg.norm(self.points[candidates] - query, axis=1)
        return int(candidates[gaps == gaps.min()].min())

    def neighbors_within(self, queries, radius):
        return self.tree.query_ball_point(np.asarray(queries).reshape(-1, 3), r=radius, return_sorted=True)

