from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from django.core.exceptions import ValidationError

from learn.models import AugmentConfig, TrainConfig

VARIANTS = ("single-shot", "dynamic", "heuristic")


class FgBgLabel(IntEnum):
    BACKGROUND = 0
    FOREGROUND = 1
    UNCERTAIN = 2


class CascadeClass(IntEnum):
    BACKGROUND = 0
    VEHICLE = 1
    PEOPLE = 2


CASCADE_CLASS_NAMES = {
    CascadeClass.BACKGROUND: "background",
    CascadeClass.VEHICLE: "vehicle",
    CascadeClass.PEOPLE: "people",
}

# Исходные классы разметки -> группы каскада; прочие классы считаются фоном
GROUPINGS = {
    "synthetic": {3: CascadeClass.VEHICLE, 4: CascadeClass.PEOPLE},
    "kitti": {
        10: CascadeClass.VEHICLE, 11: CascadeClass.VEHICLE, 13: CascadeClass.VEHICLE,
        15: CascadeClass.VEHICLE, 18: CascadeClass.VEHICLE, 20: CascadeClass.VEHICLE,
        30: CascadeClass.PEOPLE, 31: CascadeClass.PEOPLE, 32: CascadeClass.PEOPLE,
    },
}


@dataclass(frozen=True)
class CascadeConfig:
    variant: str = "heuristic"
    epsilon: float = 0.5
    car_length: tuple = (2.5, 6.0)
    car_width: tuple = (1.2, 2.5)
    car_height: tuple = (1.0, 2.2)
    ground_gap: float = 0.3
    static_eps: float = 0.5
    static_min_pts: int = 10
    threshold: float = 0.5
    epochs: int = 10
    samples: int = 16
    batch_size: int = 8
    lr: float = 0.01
    decay_at: float = 0.4
    decay_factor: float = 0.1
    hidden: int = 16
    seed: int = 0
    threads: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    learn: TrainConfig = field(default_factory=lambda: TrainConfig(mode="st", k=2))

    def is_car_sized(self, box):
        return (
            self.car_length[0] <= box.length <= self.car_length[1]
            and self.car_width[0] <= box.width <= self.car_width[1]
            and self.car_height[0] <= box.height <= self.car_height[1]
        )


@dataclass(frozen=True, eq=False)
class FgBgPseudoLabel:
    """Псевдометки кадра в исходной нумерации точек."""

    labels: np.ndarray
    frame: int
    variant: str

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(labels) and labels.max() > FgBgLabel.UNCERTAIN:
            raise ValidationError("Псевдометка вне набора {фон, передний план, неопределённо}.")
        if self.variant != "heuristic" and (labels == FgBgLabel.UNCERTAIN).any():
            raise ValidationError("Метка «неопределённо» допустима только в эвристическом режиме.")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def count(self, label):
        return int((self.labels == label).sum())


@dataclass(frozen=True, eq=False)
class FgBgSample:
    view: object
    targets: np.ndarray


@dataclass(eq=False)
class FgBgModel:
    net: object
    threshold: float = 0.5
    log: list = field(default_factory=list)


@dataclass(eq=False)
class CascadeResult:
    """Метки каскада по кадрам: 0: фон, 1 и 2: кластеры переднего плана."""

    labels: list
    foreground: list
    train_result: object = None
