import logging
import os
from dataclasses import dataclass

import numpy as np

from cloud.exceptions import ConfigurationError, EmptyInputError, LabelMismatchError, MalformedFileError
from cloud.models import INVALID_FILL, PointCloud, RangeImage

logger = logging.getLogger(__name__)

POINT_RECORD = 16
LABEL_RECORD = 4

# Палитра для PLY: индекс метки -> RGB
PALETTE = np.array([
    [128, 128, 128],
    [75, 0, 75],
    [0, 200, 255],
    [245, 150, 100],
    [255, 30, 30],
    [80, 240, 150],
    [150, 60, 30],
    [255, 255, 50],
], dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class KittiLabels:
    """Метки .label: нижние 16 бит: класс, верхние 16: экземпляр."""

    semantic: np.ndarray
    instance: np.ndarray

    def __len__(self):
        return len(self.semantic)

    def subset(self, selector):
        return KittiLabels(self.semantic[selector], self.instance[selector])


def read_kitti_bin(path, frame_index=0):
    """Читает velodyne .bin: по 4 float32 LE (x, y, z, intensity) на точку."""
    size = os.path.getsize(path)
    if size % POINT_RECORD:
        raise MalformedFileError(f"{path}: размер {size} байт не кратен {POINT_RECORD}")
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    finite = np.isfinite(raw).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        logger.warning("%s: отброшено %d точек с нечисловыми значениями", path, dropped)
    kept = raw[finite].astype(np.float64)
    return PointCloud(
        kept[:, :3],
        kept[:, 3],
        frame_index=frame_index,
        point_ids=np.flatnonzero(finite),
        dropped=dropped,
    )


def write_kitti_bin(path, cloud):
    records = np.empty((len(cloud), 4), dtype="<f4")
    records[:, :3] = cloud.xyz
    records[:, 3] = cloud.intensity
    records.tofile(path)


def read_kitti_label(path):
    size = os.path.getsize(path)
    if size % LABEL_RECORD:
        raise MalformedFileError(f"{path}: размер {size} байт не кратен {LABEL_RECORD}")
    words = np.fromfile(path, dtype="<u4")
    return KittiLabels(
        (words & 0xFFFF).astype(np.int64),
        (words >> 16).astype(np.int64),
    )


def write_kitti_label(path, semantic, instance=None):
    semantic = np.asarray(semantic, dtype=np.uint32)
    instance = np.zeros_like(semantic) if instance is None else np.asarray(instance, dtype=np.uint32)
    words = ((instance & 0xFFFF) << 16) | (semantic & 0xFFFF)
    words.astype("<u4").tofile(path)


def pair_labels(cloud, labels):
    """Сопоставляет метки файла точкам облака (с учётом отброшенных точек)."""
    if len(labels) != len(cloud) + cloud.dropped:
        raise LabelMismatchError(
            f"кадр {cloud.frame_index}: меток {len(labels)}, точек в файле {len(cloud) + cloud.dropped}"
        )
    return labels.subset(cloud.point_ids)


def normalize_intensity(cloud, scale=None):
    """Делит интенсивность на максимум, если значения выходят за 1."""
    if scale is None:
        scale = float(cloud.intensity.max()) if len(cloud) else 1.0
    if scale <= 1.0:
        return cloud
    return PointCloud(cloud.xyz, cloud.intensity / scale, frame_index=cloud.frame_index,
                      point_ids=cloud.point_ids, dropped=cloud.dropped)


def project_to_range_image(cloud, height, width, fov, drop_out_of_fov=False):
    """Сферическая проекция облака в range-изображение.

    При попадании нескольких точек в один пиксель побеждает ближайшая по дальности
    (при равенстве дальностей: с меньшим индексом).
    """
    if height <= 0 or width <= 0:
        raise ConfigurationError(f"размер range-изображения должен быть положительным, получено {height}x{width}")
    xyz = cloud.xyz
    n = len(cloud)
    r = np.linalg.norm(xyz, axis=1)
    positive = r > 0

    yaw = np.arctan2(xyz[:, 1], xyz[:, 0])
    pitch = np.zeros(n)
    pitch[positive] = np.arcsin(np.clip(xyz[positive, 2] / r[positive], -1.0, 1.0))

    u = np.floor(0.5 * (1.0 - yaw / np.pi) * width)
    v = np.floor((1.0 - (pitch + fov.f_down) / fov.total) * height)
    u = np.clip(u, 0, width - 1).astype(np.int64)
    v = np.clip(v, 0, height - 1).astype(np.int64)

    outside = (pitch > fov.f_up) | (pitch < -fov.f_down)
    usable = positive & ~(outside & drop_out_of_fov)
    pixels = np.where(usable, v * width + u, -1)

    candidates = np.flatnonzero(usable)
    order = candidates[np.lexsort((candidates, r[candidates]))]
    _, first = np.unique(pixels[order], return_index=True)
    winners = order[first]

    data = np.full((height * width, 5), INVALID_FILL)
    data[pixels[winners]] = np.column_stack([xyz[winners], cloud.intensity[winners], r[winners]])
    point_index = np.full(height * width, -1, dtype=np.int64)
    point_index[pixels[winners]] = winners

    return RangeImage(
        data=data.reshape(height, width, 5),
        valid_mask=(point_index >= 0).reshape(height, width),
        point_index=point_index.reshape(height, width),
        point_pixels=pixels,
        owned=len(winners),
        occluded=len(candidates) - len(winners),
        skipped=int((~positive).sum()),
        dropped_out_of_fov=int((positive & ~usable).sum()),
    )


def nearest_neighbor(index, query):
    """Ближайшая точка индекса к запросу: (номер точки, расстояние)."""
    if index.size == 0:
        raise EmptyInputError("поиск ближайшего соседа в пустом индексе")
    dist, idx = index.query(np.array([query[0], query[1], query[2]], dtype=np.float64))
    return int(idx[0]), float(dist[0])


def write_ply(path, cloud, labels=None, colors=None):
    """ASCII PLY с цветом на точку (для визуализации)."""
    if colors is None:
        if labels is None:
            colors = np.tile(PALETTE[0], (len(cloud), 1))
        else:
            colors = PALETTE[np.asarray(labels, dtype=np.int64) % len(PALETTE)]
    with open(path, "w") as ply:
        ply.write("ply\nformat ascii 1.0\n")
        ply.write(f"element vertex {len(cloud)}\n")
        for name in ("x", "y", "z", "intensity"):
            ply.write(f"property float {name}\n")
        for name in ("red", "green", "blue"):
            ply.write(f"property uchar {name}\n")
        ply.write("end_header\n")
        for (x, y, z), intensity, (red, green, blue) in zip(cloud.xyz, cloud.intensity, colors):
            ply.write(f"{x:.4f} {y:.4f} {z:.4f} {intensity:.4f} {red} {green} {blue}\n")
