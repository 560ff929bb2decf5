import logging
import os

import numpy as np

from cloud.exceptions import ConfigurationError, EmptyInputError, MalformedFileError
from cloud.models import SENSOR_PRESETS, PointCloud
from cloud.services import read_kitti_bin, read_kitti_label, write_kitti_bin, write_kitti_label
from preprocess.services import read_poses, write_poses
from synth.models import (
    CLASS_INTENSITY,
    Block,
    Floor,
    GroundTruthFrame,
    Pillar,
    SceneClass,
    SceneObject,
    SceneSpec,
)

logger = logging.getLogger(__name__)

# Размер ячейки, в пределах которой точка поверхности считается той же самой, м
PROVENANCE_CELL = 0.2
SURFACE_MASK = 0xFF
CELL_MASK = 0xFFFFFF

CAR_SIZE = (4.5, 1.8, 1.3)


def ray_directions(preset):
    """Единичные направления лучей в центрах пикселей сетки H x W (построчно)."""
    height, width, fov = preset
    yaw = np.pi * (1.0 - 2.0 * (np.arange(width) + 0.5) / width)
    pitch = (1.0 - (np.arange(height) + 0.5) / height) * fov.total - fov.f_down
    pitch, yaw = np.meshgrid(pitch, yaw, indexing="ij")
    return np.column_stack([
        (np.cos(pitch) * np.cos(yaw)).ravel(),
        (np.cos(pitch) * np.sin(yaw)).ravel(),
        np.sin(pitch).ravel(),
    ])


def encode_provenance(surface, body, low, high):
    """uint32: номер поверхности (8 бит) и номер ячейки точки в сетке поверхности (24 бита).

    Сетка строится по границам low..high поверхности в её собственной системе,
    поэтому номер ячейки уникален в пределах поверхности.
    """
    surface = np.asarray(surface, dtype=np.int64)
    if (surface > SURFACE_MASK).any():
        raise ConfigurationError(f"в сцене больше {SURFACE_MASK + 1} поверхностей")
    low = np.broadcast_to(np.asarray(low, dtype=np.float64), body.shape)
    high = np.broadcast_to(np.asarray(high, dtype=np.float64), body.shape)
    dims = np.floor((high - low) / PROVENANCE_CELL).astype(np.int64) + 1
    if (dims.prod(axis=1) > CELL_MASK + 1).any():
        raise ConfigurationError("поверхность слишком велика для номеров ячеек")
    cells = np.clip(np.floor((body - low) / PROVENANCE_CELL).astype(np.int64), 0, dims - 1)
    linear = (cells[:, 0] * dims[:, 1] + cells[:, 1]) * dims[:, 2] + cells[:, 2]
    return (surface << 24 | linear).astype(np.uint32)


def render_frame(spec, t, seed=0):
    pose = spec.ego_pose(t)
    local_dirs = ray_directions(spec.sensor)
    dirs = local_dirs @ pose.rotation.T
    origin = pose.translation
    surfaces = spec.surfaces(t)

    best = np.full(len(dirs), np.inf)
    owner = np.full(len(dirs), -1, dtype=np.int64)
    for index, (shape, _, _, _) in enumerate(surfaces):
        dist = shape.hit(origin, dirs)
        closer = dist < best
        best[closer] = dist[closer]
        owner[closer] = index
    hit = (owner >= 0) & (best <= spec.max_range)
    owner, ranges = owner[hit], best[hit]

    world = origin + dirs[hit] * ranges[:, None]
    body = np.zeros_like(world)
    low, high = np.zeros_like(world), np.zeros_like(world)
    for index, (shape, _, _, _) in enumerate(surfaces):
        members = owner == index
        if members.any():
            body[members] = shape.to_body(world[members])
            low[members], high[members] = shape.body_bounds

    if spec.noise_sigma > 0:
        ranges = ranges + np.random.default_rng([seed, t]).normal(0.0, spec.noise_sigma, len(ranges))
    classes = np.array([surface[1] for surface in surfaces], dtype=np.int64)[owner]
    intensity = np.array([CLASS_INTENSITY.get(SceneClass(c), 0.0) for c in classes])
    cloud = PointCloud(local_dirs[hit] * ranges[:, None], intensity, frame_index=t)
    return GroundTruthFrame(
        cloud=cloud,
        classes=classes,
        instances=np.array([surface[2] for surface in surfaces], dtype=np.int64)[owner],
        is_dynamic=np.array([surface[3] for surface in surfaces], dtype=bool)[owner],
        provenance=encode_provenance(owner, body, low, high),
        ego_pose=pose,
        body_xyz=body,
        surface=owner,
    )


def render_sequence(spec, frames, seed=0):
    """Рендер последовательности: лучи сетки сенсора против геометрии сцены в каждом кадре."""
    if frames < 2:
        raise ConfigurationError(f"последовательность должна содержать не меньше двух кадров, получено {frames}")
    if spec.floor is None and not spec.objects:
        raise EmptyInputError("в сцене нет ни земли, ни объектов")
    sequence = [render_frame(spec, t, seed) for t in range(frames)]
    logger.info("Сцена отрендерена: %d кадров, в среднем %d точек", frames,
                int(np.mean([len(frame) for frame in sequence])))
    return sequence


def car(center, velocity=(0.0, 0.0, 0.0), heading=0.0, name="car"):
    length, width, height = CAR_SIZE
    x, y = center
    # днище на 0.2 м выше земли
    return SceneObject(Block((x, y, -1.5 + height / 2), length, width, height, heading), SceneClass.VEHICLE,
                       velocity, name)


def pedestrian(center, velocity=(0.0, 0.0, 0.0), name="pedestrian"):
    return SceneObject(Pillar(center, 0.3, -1.7, 0.0), SceneClass.PERSON, velocity, name)


def building(center, length, width, height=20.0, name="building"):
    x, y = center
    return SceneObject(Block((x, y, -1.7 + height / 2), length, width, height), SceneClass.BUILDING, name=name)


def pole(center, name="pole"):
    return SceneObject(Pillar(center, 0.4, -1.7, 14.3), SceneClass.BUILDING, name=name)


def static_layout():
    """Статическая часть: фасады спереди и сзади, два столба и припаркованная машина.

    Верх фасадов и столбов выше поля зрения сенсора. Машины едут по полосе y = -6,
    пешеход идёт впереди эго по y = 4; за ними со стороны сенсора нет статических поверхностей.
    """
    return (
        building((35.0, 1.0), 4.0, 10.0, name="front"),
        building((-30.0, 4.0), 4.0, 16.0, name="rear"),
        pole((28.0, 14.0)),
        pole((-20.0, 10.0)),
        car((-5.0, 9.0), name="parked car"),
    )


def demo_scene(noise_sigma=0.01):
    """Две машины в одной полосе и пешеход; эго едет 0.3 м/кадр с лёгким поворотом."""
    movers = (
        car((-22.0, -6.0), (2.0, 0.0, 0.0), name="car 1"),
        car((-10.0, -6.0), (2.0, 0.0, 0.0), name="car 2"),
        pedestrian((2.0, 4.0), (0.45, 0.0, 0.0)),
    )
    return SceneSpec(static_layout() + movers, ego_yaw_step=np.radians(0.1), noise_sigma=noise_sigma)


def intersection_scene(noise_sigma=0.01):
    """Одна машина обгоняет эго, пешеход идёт впереди."""
    movers = (
        car((-16.0, -6.0), (2.0, 0.0, 0.0), name="car"),
        pedestrian((2.0, 4.0), (0.45, 0.0, 0.0)),
    )
    return SceneSpec(static_layout() + movers, noise_sigma=noise_sigma)


def random_scene(seed, noise_sigma=0.01):
    """Вариация демо-сцены: случайные старт и скорость подвижных объектов.

    Пешеход всегда быстрее эго, иначе эго его обгоняет.
    """
    rng = np.random.default_rng(seed)
    speed = rng.uniform(1.5, 2.5)
    first = rng.uniform(-26.0, -20.0)
    ego_speed = rng.uniform(0.2, 0.3)
    movers = (
        car((first, -6.0), (speed, 0.0, 0.0), name="car 1"),
        car((first + rng.uniform(11.0, 14.0), -6.0), (speed, 0.0, 0.0), name="car 2"),
        pedestrian((rng.uniform(1.0, 3.0), 4.0), (ego_speed + rng.uniform(0.05, 0.1), 0.0, 0.0)),
    )
    return SceneSpec(static_layout() + movers, ego_step=(ego_speed, 0.0, 0.0),
                     ego_yaw_step=np.radians(rng.uniform(-0.1, 0.1)), noise_sigma=noise_sigma)


SCENES = {
    "demo": demo_scene,
    "intersection": intersection_scene,
}


def _shape_from_dict(data):
    if data["kind"] == "block":
        length, width, height = data["size"]
        return Block(tuple(data["center"]), length, width, height, np.radians(data.get("heading_deg", 0.0)))
    x, y, z_low = data["center"]
    return Pillar((x, y), data["radius"], z_low, z_low + data["height"])


def scene_from_dict(data):
    """SceneSpec из провалидированного словаря (см. SceneSpecSerializer)."""
    objects = tuple(
        SceneObject(_shape_from_dict(item), SceneClass[item["scene_class"].upper()],
                    tuple(item.get("velocity", (0.0, 0.0, 0.0))), item.get("name", ""))
        for item in data.get("objects", [])
    )
    floor = data.get("floor", {"height": -1.7, "extent": 50.0})
    return SceneSpec(
        objects=objects,
        floor=Floor(floor["height"], floor["extent"]) if floor else None,
        ego_step=tuple(data.get("ego_step", (0.3, 0.0, 0.0))),
        ego_yaw_step=np.radians(data.get("ego_yaw_step_deg", 0.0)),
        sensor=SENSOR_PRESETS[data.get("sensor", "synthetic")],
        noise_sigma=data.get("noise_sigma", 0.01),
        max_range=data.get("max_range", 60.0),
    )


def frame_name(t):
    return f"{t:06d}"


def save_sequence(directory, frames):
    """KITTI-раскладка: clouds/*.bin, labels/*.label, сайдкары provenance/*.u32 и motion/*.u8, poses_gt.txt."""
    for sub in ("clouds", "labels", "provenance", "motion"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    for t, frame in enumerate(frames):
        name = frame_name(t)
        write_kitti_bin(os.path.join(directory, "clouds", f"{name}.bin"), frame.cloud)
        write_kitti_label(os.path.join(directory, "labels", f"{name}.label"), frame.classes, frame.instances)
        frame.provenance.astype("<u4").tofile(os.path.join(directory, "provenance", f"{name}.u32"))
        frame.is_dynamic.astype(np.uint8).tofile(os.path.join(directory, "motion", f"{name}.u8"))
    write_poses(os.path.join(directory, "poses_gt.txt"), [frame.ego_pose for frame in frames])


def _sidecar(path, dtype, size):
    values = np.fromfile(path, dtype=dtype)
    if len(values) != size:
        raise MalformedFileError(f"{path}: {len(values)} значений вместо {size}")
    return values


def load_sequence(directory):
    names = sorted(name[:-4] for name in os.listdir(os.path.join(directory, "clouds")) if name.endswith(".bin"))
    poses = read_poses(os.path.join(directory, "poses_gt.txt"))
    if len(poses) != len(names):
        raise MalformedFileError(f"{directory}: поз {len(poses)}, кадров {len(names)}")
    frames = []
    for t, name in enumerate(names):
        cloud = read_kitti_bin(os.path.join(directory, "clouds", f"{name}.bin"), frame_index=t)
        labels = read_kitti_label(os.path.join(directory, "labels", f"{name}.label"))
        frames.append(GroundTruthFrame(
            cloud=cloud,
            classes=labels.semantic.astype(np.int64),
            instances=labels.instance.astype(np.int64),
            is_dynamic=_sidecar(os.path.join(directory, "motion", f"{name}.u8"), np.uint8, len(cloud)).astype(bool),
            provenance=_sidecar(os.path.join(directory, "provenance", f"{name}.u32"), "<u4", len(cloud)),
            ego_pose=poses[t],
        ))
    return frames
