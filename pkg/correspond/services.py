import logging
import math

import numpy as np

from cloud.exceptions import ConfigurationError, EmptyInputError, MalformedFileError
from cloud.models import KdIndex, RigidTransform
from correspond.models import DEFAULT_INTERVALS, CorrespondConfig, CorrespondenceSet, PairKind
from preprocess.services import icp_align

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"CORR"
CACHE_VERSION = 1
HEADER = np.dtype([
    ("magic", "S4"), ("version", "<u2"), ("frame_a", "<u4"), ("frame_b", "<u4"),
    ("count", "<u4"), ("coverage", "<f8"), ("low_quality", "u1"),
])
TRIPLE = np.dtype([("id_a", "<u4"), ("id_b", "<u4"), ("kind", "u1")])


def positions_of(cloud, ids):
    """Позиции точек облака по их исходным номерам (point_ids отсортированы)."""
    ids = np.asarray(ids, dtype=np.int64)
    positions = np.searchsorted(cloud.point_ids, ids)
    positions = np.clip(positions, 0, max(len(cloud) - 1, 0))
    if len(ids) and (not len(cloud) or (cloud.point_ids[positions] != ids).any()):
        raise EmptyInputError(f"кадр {cloud.frame_index}: часть номеров точек отсутствует в облаке")
    return positions


def static_candidates(aligned, t, exclude_ids=()):
    """Точки кадра t для статических соответствий: земля и оставленные SOR, без исключённых."""
    cloud = aligned.originals[t]
    mask = aligned.correspondence_mask(t).copy()
    if len(exclude_ids):
        mask[positions_of(cloud, exclude_ids)] = False
    return cloud.point_ids[mask], aligned.poses[t].apply(cloud.xyz[mask])


def static_correspondences(aligned, a, b, max_dist=0.3, exclude_a=(), exclude_b=()):
    """Ближайший сосед в выровненном кадре b для каждой статической точки кадра a."""
    ids_a, xyz_a = static_candidates(aligned, a, exclude_a)
    ids_b, xyz_b = static_candidates(aligned, b, exclude_b)
    if not len(ids_a) or not len(ids_b):
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    _, nearest = KdIndex(xyz_b).query(xyz_a, distance_upper_bound=max_dist)
    paired = nearest >= 0
    return ids_a[paired], ids_b[nearest[paired]]


def initial_box_motion(box_a, box_b):
    """Начальное приближение ICP по сдвигу центров и повороту курса (курс определён по модулю π)."""
    delta = (box_b.heading - box_a.heading + math.pi / 2) % math.pi - math.pi / 2
    rotation = RigidTransform.from_yaw(delta)
    return RigidTransform(rotation.rotation, box_b.center - rotation.apply(box_a.center))


def dynamic_correspondences(tracks, aligned, a, b, cfg=CorrespondConfig()):
    """Жёсткий ICP между боксами одного трека в кадрах a и b."""
    ids_a, ids_b = [], []
    for track in tracks:
        box_a, box_b = track.box_at(a), track.box_at(b)
        if box_a is None or box_b is None:
            continue
        members_a = box_a.point_ids
        xyz_a = aligned.poses[a].apply(aligned.originals[a].xyz[positions_of(aligned.originals[a], members_a)])
        xyz_b = aligned.poses[b].apply(aligned.originals[b].xyz[positions_of(aligned.originals[b], box_b.point_ids)])
        try:
            result = icp_align(xyz_a, xyz_b, init=initial_box_motion(box_a, box_b), cfg=cfg.icp)
        except EmptyInputError:
            logger.info("Трек %d: слишком мало точек для ICP (%d -> %d)", track.id, a, b)
            continue
        if not result.converged:
            logger.info("Трек %d: ICP %d -> %d не сошёлся, пары не добавлены", track.id, a, b)
            continue
        _, nearest = KdIndex(xyz_b).query(result.transform.apply(xyz_a), distance_upper_bound=cfg.dynamic_max_dist)
        paired = nearest >= 0
        ids_a.append(members_a[paired])
        ids_b.append(box_b.point_ids[nearest[paired]])
    if not ids_a:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(ids_a), np.concatenate(ids_b)


def sample_pair(length, rng, intervals=DEFAULT_INTERVALS):
    """(t, t-k): k равновероятно из подходящих интервалов, затем t равновероятно из [k, T-1]."""
    fitting = sorted(k for k in set(intervals) if 1 <= k <= length - 1)
    if not fitting:
        raise ConfigurationError(f"последовательность из {length} кадров короче любого интервала {sorted(intervals)}")
    k = int(fitting[rng.integers(len(fitting))])
    t = int(rng.integers(k, length))
    return t, t - k


def candidate_pairs(length, intervals, valid=None):
    """Все пары (t, t-k) для кэширования соответствий."""
    return [
        (t, t - k)
        for k in sorted(set(intervals)) if 1 <= k < length
        for t in range(k, length)
        if valid is None or (valid[t] and valid[t - k])
    ]


def _excluded_ids(tracks, frame, dynamic_ids):
    """Члены боксов треков и точки с динамической оценкой кадра."""
    chunks = [track.box_at(frame).point_ids for track in tracks if track.box_at(frame) is not None]
    chunks.append(np.asarray(dynamic_ids.get(frame, ()), dtype=np.int64))
    return np.unique(np.concatenate(chunks))


def build_correspondences(aligned, tracks, a, b, cfg=CorrespondConfig(), dynamic_ids=None):
    """Статические и динамические пары между кадрами a и b."""
    if a == b:
        raise ConfigurationError("соответствия строятся только между разными кадрами")
    dynamic_ids = dynamic_ids or {}
    exclude_a = _excluded_ids(tracks, a, dynamic_ids)
    exclude_b = _excluded_ids(tracks, b, dynamic_ids)

    static_a, static_b = static_correspondences(aligned, a, b, cfg.static_max_dist, exclude_a, exclude_b)
    moving_a, moving_b = dynamic_correspondences(tracks, aligned, a, b, cfg)
    candidates = int(aligned.correspondence_mask(a).sum())
    coverage = (len(static_a) + len(moving_a)) / candidates if candidates else 0.0
    low_quality = coverage < cfg.min_coverage
    if low_quality:
        logger.warning("Пара (%d, %d): покрытие %.3f ниже порога %.3f", a, b, coverage, cfg.min_coverage)
    return CorrespondenceSet(
        frame_a=a,
        frame_b=b,
        ids_a=np.concatenate([static_a, moving_a]),
        ids_b=np.concatenate([static_b, moving_b]),
        kinds=np.concatenate([np.full(len(static_a), PairKind.STATIC), np.full(len(moving_a), PairKind.DYNAMIC)]),
        coverage=coverage,
        low_quality=low_quality,
    )


def to_pixel_pairs(corr, cloud_a, rv_a, cloud_b, rv_b):
    """Переводит пары точек в пары пикселей; пары с точками без своего пикселя отбрасываются."""
    owners_a = rv_a.owner_pixels()[positions_of(cloud_a, corr.ids_a)]
    owners_b = rv_b.owner_pixels()[positions_of(cloud_b, corr.ids_b)]
    kept = (owners_a >= 0) & (owners_b >= 0)
    return owners_a[kept], owners_b[kept], corr.kinds[kept]


def write_correspondences(path, corr):
    header = np.zeros(1, dtype=HEADER)
    header[0] = (CACHE_MAGIC, CACHE_VERSION, corr.frame_a, corr.frame_b, len(corr), corr.coverage, corr.low_quality)
    triples = np.zeros(len(corr), dtype=TRIPLE)
    triples["id_a"] = corr.ids_a
    triples["id_b"] = corr.ids_b
    triples["kind"] = corr.kinds
    with open(path, "wb") as stream:
        stream.write(header.tobytes())
        stream.write(triples.tobytes())


def read_correspondences(path):
    with open(path, "rb") as stream:
        raw = stream.read()
    if len(raw) < HEADER.itemsize:
        raise MalformedFileError(f"{path}: файл короче заголовка")
    header = np.frombuffer(raw[:HEADER.itemsize], dtype=HEADER)[0]
    if header["magic"] != CACHE_MAGIC or header["version"] != CACHE_VERSION:
        raise MalformedFileError(f"{path}: неизвестный формат кэша соответствий")
    body = raw[HEADER.itemsize:]
    if len(body) != int(header["count"]) * TRIPLE.itemsize:
        raise MalformedFileError(f"{path}: число записей не совпадает с заголовком")
    triples = np.frombuffer(body, dtype=TRIPLE)
    return CorrespondenceSet(
        frame_a=int(header["frame_a"]),
        frame_b=int(header["frame_b"]),
        ids_a=triples["id_a"].astype(np.int64),
        ids_b=triples["id_b"].astype(np.int64),
        kinds=triples["kind"],
        coverage=float(header["coverage"]),
        low_quality=bool(header["low_quality"]),
    )
