from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from cloud.exceptions import ShapeMismatchError

MODES = ("baseline", "ego", "st", "st+dloss")

# Масштаб входных каналов (x, y, z, intensity, range); невалидные пиксели обнуляются
INPUT_SCALE = np.array([0.05, 0.05, 0.2, 1.0, 0.05])


class Group(IntEnum):
    NONE = -1
    SMALL_DYNAMIC = 0
    LARGE_STATIC = 1
    GROUND = 2


@dataclass(frozen=True)
class AugmentConfig:
    translate: bool = True
    max_translation: float = 2.0
    flip: bool = True
    rotate: bool = True
    downsample: bool = True
    keep_ratio: float = 0.9


@dataclass(frozen=True)
class KMeansConfig:
    iters: int = 20
    batch_size: int = 4096
    n_init: int = 1
    full_batch: bool = False


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "st+dloss"
    epochs: int = 10
    samples: int = 24
    batch_size: int = 12
    lr: float = 0.05
    decay_at: float = 0.4
    decay_factor: float = 0.1
    k: int = 5
    channels: int = 32
    hidden: int = 16
    temperature: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma_w: float = 1.0
    delta_v: float = 0.5
    delta_d: float = 1.5
    v_split: float = 3.0
    seed: int = 0
    threads: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)


@dataclass(eq=False)
class EmbeddingNet:
    """Свёрточный энкодер: conv3x3 -> tanh -> conv3x3 -> tanh -> 1x1 -> нормировка (или сигмоида)."""

    params: dict
    output: str = "normalize"

    @classmethod
    def initialize(cls, channels=32, hidden=16, seed=0, output="normalize"):
        rng = np.random.default_rng(seed)
        in_channels = len(INPUT_SCALE)
        params = {
            "w1": rng.normal(0.0, (in_channels * 9) ** -0.5, size=(hidden, in_channels, 3, 3)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, (hidden * 9) ** -0.5, size=(hidden, hidden, 3, 3)),
            "b2": np.zeros(hidden),
            "w3": rng.normal(0.0, hidden ** -0.5, size=(channels, hidden)),
            "b3": np.zeros(channels),
        }
        return cls(params, output)

    @property
    def channels(self):
        return self.params["w3"].shape[0]

    @property
    def hidden(self):
        return self.params["w1"].shape[0]

    @property
    def parameter_count(self):
        return int(sum(value.size for value in self.params.values()))

    def copy(self):
        return EmbeddingNet({name: value.copy() for name, value in self.params.items()}, self.output)


@dataclass(frozen=True, eq=False)
class EmbeddingField:
    """Признаки H x W x C; значимы только пиксели valid_mask."""

    features: np.ndarray
    valid_mask: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.features.shape[:2] != self.valid_mask.shape:
            raise ShapeMismatchError(
                f"признаки {self.features.shape[:2]} не совпадают с маской {self.valid_mask.shape}"
            )

    @property
    def shape(self):
        return self.features.shape

    def vectors(self):
        """Признаки валидных пикселей в порядке построчного обхода."""
        return self.features[self.valid_mask]

    def valid_pixels(self):
        return np.flatnonzero(self.valid_mask)


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids: np.ndarray
    labels: list
    objective: float
    history: tuple = ()
    reseeded: int = 0


@dataclass(frozen=True, eq=False)
class LossTerms:
    """Значения слагаемых потерь и градиенты по признакам двух видов."""

    values: dict
    grad_a: np.ndarray
    grad_b: np.ndarray

    @property
    def total(self):
        return self.values["total"]


@dataclass(frozen=True, eq=False)
class TrainingSequence:
    """Кадры одной последовательности с результатами автолейблинга.

    correspondences: словарь (t, t-k) -> CorrespondenceSet; groups: по массиву групп
    на кадр (в позициях исходного облака) или None.
    """

    frames: tuple
    preset: object
    correspondences: dict = field(default_factory=dict)
    groups: tuple | None = None

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True, eq=False)
class PreparedView:
    """Аугментированный вид кадра, готовый к подаче в сеть."""

    inputs: tuple
    owner_ids: np.ndarray
    lookup: np.ndarray
    groups: np.ndarray | None = None

    @property
    def size(self):
        return len(self.owner_ids)

    def rows_of(self, ids):
        """Строка вида для каждого исходного номера точки, -1 если точка не владеет пикселем."""
        ids = np.asarray(ids, dtype=np.int64)
        rows = np.full(len(ids), -1, dtype=np.int64)
        inside = ids < len(self.lookup)
        rows[inside] = self.lookup[ids[inside]]
        return rows


@dataclass(frozen=True, eq=False)
class TrainingSample:
    sequence: int
    frame_a: int
    frame_b: int
    view_a: PreparedView
    view_b: PreparedView
    rows_a: np.ndarray
    rows_b: np.ndarray


@dataclass(eq=False)
class TrainResult:
    net: EmbeddingNet
    centroids: np.ndarray
    log: list = field(default_factory=list)
