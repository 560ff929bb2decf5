from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError


@dataclass(frozen=True)
class TrackingConfig:
    weights: tuple = (0.5, 0.3, 0.2)
    d_norm: float = 5.0
    gate_dist: float = 8.0
    max_misses: int = 3


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Строки: текущие боксы, столбцы: последние боксы треков; +inf: пара отсечена."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            values = np.atleast_2d(values)
        if np.isnan(values).any() or (values < 0).any():
            raise ValidationError("Стоимости должны быть неотрицательными числами или +inf.")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    def finite(self):
        return np.isfinite(self.values)


@dataclass(eq=False)
class Track:
    """Трек объекта: не больше одного бокса на кадр, кадры строго возрастают."""

    id: int
    boxes: dict = field(default_factory=dict)
    last_seen: int = -1
    misses: int = 0

    def add(self, box):
        if box.frame <= self.last_seen:
            raise ValidationError(f"Трек {self.id}: кадр {box.frame} не позже последнего ({self.last_seen}).")
        self.boxes[box.frame] = box
        self.last_seen = box.frame
        self.misses = 0

    @property
    def last_box(self):
        return self.boxes[self.last_seen]

    def box_at(self, frame):
        return self.boxes.get(frame)

    @property
    def frames(self):
        return sorted(self.boxes)

    def __len__(self):
        return len(self.boxes)


@dataclass(eq=False)
class TrackRegistry:
    """Состояние трекера последовательности: активные и завершённые треки."""

    active: list = field(default_factory=list)
    retired: list = field(default_factory=list)
    next_id: int = 0

    def open(self, box):
        track = Track(self.next_id)
        track.add(box)
        self.next_id += 1
        self.active.append(track)
        return track

    def all_tracks(self):
        return sorted(self.active + self.retired, key=lambda track: track.id)

    def tracks_at(self, frame):
        return [track for track in self.all_tracks() if frame in track.boxes]
