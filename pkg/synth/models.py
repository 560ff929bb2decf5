from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from cloud.exceptions import ConfigurationError
from cloud.models import SENSOR_PRESETS, PointCloud, RigidTransform, SensorPreset
from cloud.validators import NonNegativeValidator

# Минимальная дистанция попадания луча, м
HIT_EPSILON = 1e-6


class SceneClass(IntEnum):
    UNLABELED = 0
    GROUND = 1
    BUILDING = 2
    VEHICLE = 3
    PERSON = 4


CLASS_NAMES = {
    SceneClass.GROUND: "ground",
    SceneClass.BUILDING: "building",
    SceneClass.VEHICLE: "vehicle",
    SceneClass.PERSON: "person",
}

# Интенсивность без физической модели: постоянная по классу плюс шум
CLASS_INTENSITY = {
    SceneClass.GROUND: 0.3,
    SceneClass.BUILDING: 0.5,
    SceneClass.VEHICLE: 0.7,
    SceneClass.PERSON: 0.4,
}


@dataclass(frozen=True)
class Floor:
    """Горизонтальная плоскость z = height в квадрате |x|, |y| <= extent."""

    height: float = -1.7
    extent: float = 50.0

    def moved(self, offset):
        return self

    def hit(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = (self.height - origin[2]) / dirs[:, 2]
        points = origin + dirs * np.where(np.isfinite(dist), dist, 0.0)[:, None]
        inside = (np.abs(points[:, 0]) <= self.extent) & (np.abs(points[:, 1]) <= self.extent)
        return np.where((dirs[:, 2] < 0) & (dist > HIT_EPSILON) & inside, dist, np.inf)

    def to_body(self, xyz):
        return np.column_stack([xyz[:, :2], xyz[:, 2] - self.height])

    def contains_surface(self, body, tolerance=1e-9):
        return np.abs(body[:, 2]) <= tolerance

    @property
    def body_bounds(self):
        return np.array([-self.extent, -self.extent, 0.0]), np.array([self.extent, self.extent, 0.0])


@dataclass(frozen=True)
class Block:
    """Бокс: центр, длина вдоль курса, ширина, высота, курс вокруг z."""

    center: tuple
    length: float
    width: float
    height: float
    heading: float = 0.0

    @property
    def half(self):
        return np.array([self.length, self.width, self.height]) / 2

    @property
    def rotation(self):
        return RigidTransform.from_yaw(self.heading).rotation

    def moved(self, offset):
        return Block(tuple(np.add(self.center, offset)), self.length, self.width, self.height, self.heading)

    def hit(self, origin, dirs):
        rotation = self.rotation
        local_origin = (origin - np.asarray(self.center)) @ rotation
        local_dirs = dirs @ rotation
        with np.errstate(divide="ignore", invalid="ignore"):
            inverse = 1.0 / local_dirs
            first = (-self.half - local_origin) * inverse
            second = (self.half - local_origin) * inverse
        near = np.nanmax(np.minimum(first, second), axis=1)
        far = np.nanmin(np.maximum(first, second), axis=1)
        hit = (far >= near) & (near > HIT_EPSILON)
        return np.where(hit, near, np.inf)

    def to_body(self, xyz):
        return (xyz - np.asarray(self.center)) @ self.rotation

    def contains_surface(self, body, tolerance=1e-9):
        gap = np.abs(np.abs(body) - self.half)
        inside = (np.abs(body) <= self.half + tolerance).all(axis=1)
        return inside & (gap.min(axis=1) <= tolerance)

    @property
    def body_bounds(self):
        return -self.half, self.half


@dataclass(frozen=True)
class Pillar:
    """Вертикальный цилиндр с крышкой сверху."""

    center: tuple
    radius: float
    z_low: float
    z_high: float

    def moved(self, offset):
        x, y = self.center
        return Pillar((x + offset[0], y + offset[1]), self.radius, self.z_low + offset[2], self.z_high + offset[2])

    def hit(self, origin, dirs):
        ox, oy = origin[0] - self.center[0], origin[1] - self.center[1]
        a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
        b = 2.0 * (ox * dirs[:, 0] + oy * dirs[:, 1])
        c = ox ** 2 + oy ** 2 - self.radius ** 2
        disc = b ** 2 - 4.0 * a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
            cap = (self.z_high - origin[2]) / dirs[:, 2]
        side_z = origin[2] + side * dirs[:, 2]
        side_ok = (disc >= 0) & (a > 0) & (side > HIT_EPSILON) & (side_z >= self.z_low) & (side_z <= self.z_high)
        cap_xy = np.column_stack([ox + cap * dirs[:, 0], oy + cap * dirs[:, 1]])
        cap_ok = (dirs[:, 2] < 0) & (cap > HIT_EPSILON) & ((cap_xy ** 2).sum(axis=1) <= self.radius ** 2)
        return np.minimum(np.where(side_ok, side, np.inf), np.where(cap_ok, cap, np.inf))

    def to_body(self, xyz):
        return np.column_stack([xyz[:, 0] - self.center[0], xyz[:, 1] - self.center[1], xyz[:, 2] - self.z_low])

    def contains_surface(self, body, tolerance=1e-9):
        radial = np.hypot(body[:, 0], body[:, 1])
        on_side = np.abs(radial - self.radius) <= tolerance
        on_cap = (np.abs(body[:, 2] - (self.z_high - self.z_low)) <= tolerance) & (radial <= self.radius + tolerance)
        return on_side | on_cap

    @property
    def body_bounds(self):
        radius = self.radius
        return np.array([-radius, -radius, 0.0]), np.array([radius, radius, self.z_high - self.z_low])


@dataclass(frozen=True)
class SceneObject:
    """Объект сцены с классом; ненулевая скорость (м/кадр) делает его подвижным."""

    shape: object
    scene_class: SceneClass
    velocity: tuple = (0.0, 0.0, 0.0)
    name: str = ""

    @property
    def dynamic(self):
        return any(self.velocity)

    def at(self, t):
        return self.shape.moved(np.asarray(self.velocity, dtype=np.float64) * t)


@dataclass(frozen=True)
class SceneSpec:
    """Сцена: земля, объекты, траектория эго (шаг переноса и поворота за кадр), сенсор и шум дальности."""

    objects: tuple
    floor: Floor | None = field(default_factory=Floor)
    ego_step: tuple = (0.3, 0.0, 0.0)
    ego_yaw_step: float = 0.0
    sensor: SensorPreset = SENSOR_PRESETS["synthetic"]
    noise_sigma: float = 0.01
    max_range: float = 60.0

    def __post_init__(self):
        NonNegativeValidator("noise_sigma")(self.noise_sigma)
        if self.max_range <= 0:
            raise ConfigurationError("max_range должен быть положительным")

    def ego_pose(self, t):
        """Поза сенсора кадра t в мировой системе (мир = система кадра 0)."""
        return RigidTransform.from_yaw(t * self.ego_yaw_step, np.asarray(self.ego_step, dtype=np.float64) * t)

    def surfaces(self, t):
        """(форма в кадре t, класс, номер экземпляра, подвижность) для земли и всех объектов."""
        result = []
        if self.floor is not None:
            result.append((self.floor, SceneClass.GROUND, 0, False))
        for instance, item in enumerate(self.objects, start=1):
            result.append((item.at(t), item.scene_class, instance, item.dynamic))
        return result

    @property
    def movers(self):
        return [item for item in self.objects if item.dynamic]


@dataclass(frozen=True, eq=False)
class GroundTruthFrame:
    """Кадр симулятора с разметкой для каждой точки.

    body_xyz: координаты точки в собственной системе поверхности (неизменны при жёстком движении),
    surface: номер поверхности в SceneSpec.surfaces; оба отсутствуют у кадров, прочитанных с диска.
    """

    cloud: PointCloud
    classes: np.ndarray
    instances: np.ndarray
    is_dynamic: np.ndarray
    provenance: np.ndarray
    ego_pose: RigidTransform
    body_xyz: np.ndarray | None = None
    surface: np.ndarray | None = None

    def __len__(self):
        return len(self.cloud)

    @property
    def world_xyz(self):
        return self.ego_pose.apply(self.cloud.xyz)
