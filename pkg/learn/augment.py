from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cloud.models import PointCloud
from learn.models import AugmentConfig


@dataclass(frozen=True, eq=False)
class GeomTransform:
    """Геометрическое преобразование облака: прореживание, отражение y -> -y, поворот на 180°, сдвиг по xy."""

    flip: bool = False
    rot180: bool = False
    translation: tuple = (0.0, 0.0)
    keep_ratio: float = 1.0
    seed: int = 0

    def apply(self, cloud):
        if self.keep_ratio < 1.0 and len(cloud):
            rng = np.random.default_rng(self.seed)
            kept = np.sort(rng.choice(len(cloud), max(1, int(round(self.keep_ratio * len(cloud)))), replace=False))
            cloud = cloud.subset(kept)
        xyz = cloud.xyz.copy()
        if self.flip:
            xyz[:, 1] = -xyz[:, 1]
        if self.rot180:
            xyz[:, :2] = -xyz[:, :2]
        if any(self.translation):
            xyz[:, :2] += self.translation
        return PointCloud(xyz, cloud.intensity, frame_index=cloud.frame_index, point_ids=cloud.point_ids)


IDENTITY = GeomTransform()


def random_transform(rng, cfg=AugmentConfig()):
    """Случайное преобразование с учётом включённых аугментаций."""
    flip = bool(cfg.flip and rng.random() < 0.5)
    rot180 = bool(cfg.rotate and rng.random() < 0.5)
    translation = tuple(rng.uniform(-cfg.max_translation, cfg.max_translation, 2)) if cfg.translate else (0.0, 0.0)
    keep_ratio = cfg.keep_ratio if cfg.downsample else 1.0
    return GeomTransform(flip, rot180, translation, keep_ratio, int(rng.integers(2 ** 31 - 1)))
