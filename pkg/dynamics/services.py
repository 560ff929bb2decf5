import csv
import logging
import math
from collections import deque

import numpy as np
from scipy.spatial import cKDTree

from cloud.exceptions import EmptyInputError, MalformedFileError
from cloud.models import PointCloud
from dynamics.models import NOISE, BoxInstance, DynamicScoreField, DynamicsConfig
from dynamics.validators import ThresholdValidator

logger = logging.getLogger(__name__)

# Верхняя граница оценки: 1 - exp(-x) в float64 округляется до 1 при больших x
SCORE_CEILING = np.nextafter(1.0, 0.0)
ISOTROPY_TOLERANCE = 1e-9
BOX_COLUMNS = ("frame", "cx", "cy", "cz", "heading", "length", "width", "height", "points")


def reference_frames(aligned, i, window):
    """Соседние кадры i-M..i+M без самого i, без выходящих за последовательность и без исключённых."""
    return [
        t for t in range(i - window, i + window + 1)
        if t != i and 0 <= t < len(aligned) and aligned.valid[t]
    ]


def dynamic_scores(aligned, i, window=3, lam=1.0):
    """score = 1 - exp(-λ · max_t ‖p - NN_t(p)‖) по опорным кадрам."""
    refs = reference_frames(aligned, i, window)
    if not refs:
        raise EmptyInputError(f"кадр {i}: нет опорных кадров в окне M={window}")
    points = aligned.aligned(i)
    farthest = np.zeros(len(points))
    for t in refs:
        dist, _ = aligned.index(t).query(points)
        farthest = np.maximum(farthest, dist)
    scores = np.minimum(-np.expm1(-lam * farthest), SCORE_CEILING)
    return DynamicScoreField(
        scores=scores,
        point_ids=aligned.clouds[i].point_ids,
        frame=i,
        window=window,
        lam=lam,
    )


def split_dynamic(field, epsilon=0.5):
    ThresholdValidator("epsilon")(epsilon)
    return field.scores >= epsilon


def dbscan(points, eps, min_pts):
    """DBSCAN с детерминированным порядком обхода.

    Кластеры нумеруются в порядке появления первой core-точки; граничная точка
    достаётся кластеру, который дошёл до неё первым. Шум помечается NOISE.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    neighborhoods = cKDTree(points).query_ball_point(points, r=eps, return_sorted=True)
    core = np.fromiter((len(hood) >= min_pts for hood in neighborhoods), dtype=bool, count=n)
    cluster = 0
    for seed in range(n):
        if labels[seed] != NOISE or not core[seed]:
            continue
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            current = queue.popleft()
            for neighbor in neighborhoods[current]:
                if labels[neighbor] == NOISE:
                    labels[neighbor] = cluster
                    if core[neighbor]:
                        queue.append(neighbor)
        cluster += 1
    return labels


def cluster_dynamic(cloud, field, mask, cfg=DynamicsConfig()):
    """Кластеры динамических точек по 4-D признакам (x, y, z, score_scale·score).

    Возвращает список массивов позиций в cloud.
    """
    positions = np.flatnonzero(mask)
    if not len(positions):
        return []
    features = np.column_stack([cloud.xyz[positions], cfg.score_scale * field.scores[positions]])
    labels = dbscan(features, cfg.eps, cfg.min_pts)
    return [positions[labels == label] for label in range(labels.max() + 1)]


def cluster_static(xyz, eps, min_pts):
    """Кластеры по координатам без оценки подвижности."""
    labels = dbscan(xyz, eps, min_pts)
    return [np.flatnonzero(labels == label) for label in range(labels.max() + 1)] if len(labels) else []


def fit_box(points, point_ids=None, frame=0):
    """Бокс по облаку кластера: курс из главной оси ковариации в плоскости xy."""
    xyz = points.xyz if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(xyz) < 3:
        raise EmptyInputError(f"для бокса нужно не меньше трёх точек, получено {len(xyz)}")
    if point_ids is None:
        point_ids = points.point_ids if isinstance(points, PointCloud) else np.arange(len(xyz))

    eigenvalues, eigenvectors = np.linalg.eigh(np.cov(xyz[:, :2].T))
    if eigenvalues[1] - eigenvalues[0] <= ISOTROPY_TOLERANCE * max(eigenvalues[1], 1e-12):
        heading = 0.0
    else:
        major = eigenvectors[:, 1]
        heading = math.atan2(major[1], major[0]) % math.pi

    c, s = math.cos(heading), math.sin(heading)
    along = xyz[:, 0] * c + xyz[:, 1] * s
    across = -xyz[:, 0] * s + xyz[:, 1] * c
    length, width = float(np.ptp(along)), float(np.ptp(across))
    mid_along = (along.max() + along.min()) / 2
    mid_across = (across.max() + across.min()) / 2
    if length < width:
        length, width = width, length
        heading = (heading + math.pi / 2) % math.pi
    center = np.array([
        mid_along * c - mid_across * s,
        mid_along * s + mid_across * c,
        (xyz[:, 2].max() + xyz[:, 2].min()) / 2,
    ])
    if heading >= math.pi - 1e-12:
        heading = 0.0
    return BoxInstance(center, heading, length, width, float(np.ptp(xyz[:, 2])), point_ids, frame)


def filter_boxes(boxes, cfg=DynamicsConfig()):
    """Отбрасывает слишком маленькие, слишком большие и малочисленные боксы."""
    return [
        box for box in boxes
        if box.size >= cfg.n_min
        and max(box.length, box.width, box.height) <= cfg.max_side
        and cfg.min_volume <= box.volume <= cfg.max_volume
    ]


def detect_frame(aligned, i, cfg=DynamicsConfig()):
    """Оценка, порог, кластеризация и боксы для одного кадра (в системе кадра 0)."""
    field = dynamic_scores(aligned, i, cfg.window, cfg.lam)
    mask = split_dynamic(field, cfg.epsilon)
    frame_cloud = PointCloud(aligned.aligned(i), aligned.clouds[i].intensity, frame_index=i,
                             point_ids=aligned.clouds[i].point_ids)
    clusters = cluster_dynamic(frame_cloud, field, mask, cfg)
    boxes = [
        fit_box(frame_cloud.xyz[cluster], frame_cloud.point_ids[cluster], frame=i)
        for cluster in clusters if len(cluster) >= 3
    ]
    kept = filter_boxes(boxes, cfg)
    logger.debug("Кадр %d: динамических точек %d, кластеров %d, боксов после фильтра %d",
                 i, int(mask.sum()), len(clusters), len(kept))
    return field, mask, kept


def write_scores(path, field, size):
    """Отладочный сайдкар: float32 LE на каждую точку файла кадра."""
    field.to_full(size).astype("<f4").tofile(path)


def read_scores(path):
    return np.fromfile(path, dtype="<f4").astype(np.float64)


def write_boxes_csv(path, boxes):
    rows = sorted(
        (box.frame, *box.center, box.heading, box.length, box.width, box.height, len(box.point_ids))
        for box in boxes
    )
    with open(path, "w", newline="") as stream:
        writer = csv.writer(stream)
        writer.writerow(BOX_COLUMNS)
        writer.writerows(rows)


def save_boxes(path, boxes):
    ids = [box.point_ids for box in boxes]
    np.savez(
        path,
        params=np.array([[box.frame, *box.center, box.heading, box.length, box.width, box.height]
                         for box in boxes]).reshape(-1, 8),
        offsets=np.cumsum([0] + [len(chunk) for chunk in ids]),
        point_ids=np.concatenate(ids) if ids else np.empty(0, dtype=np.int64),
    )


def load_boxes(path):
    try:
        with np.load(path) as archive:
            params, offsets, ids = archive["params"], archive["offsets"], archive["point_ids"]
    except (OSError, KeyError, ValueError) as error:
        raise MalformedFileError(f"{path}: {error}") from error
    return [
        BoxInstance(row[1:4], float(row[4]), float(row[5]), float(row[6]), float(row[7]),
                    ids[offsets[k]:offsets[k + 1]], int(row[0]))
        for k, row in enumerate(params)
    ]
