import logging

import numpy as np
from sklearn.cluster import kmeans_plusplus

from cloud.exceptions import EmptyInputError
from learn.models import KMeansConfig, KMeansResult

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


def _normalize(vectors):
    return vectors / np.maximum(np.linalg.norm(vectors, axis=-1, keepdims=True), NORM_FLOOR)


def squared_distances(points, centroids):
    distances = (
        (points ** 2).sum(axis=1, keepdims=True)
        - 2.0 * points @ centroids.T
        + (centroids ** 2).sum(axis=1)
    )
    return np.maximum(distances, 0.0)


def assign(points, centroids):
    """Метка ближайшего центра (при равенстве: меньший номер) и квадрат расстояния до него."""
    distances = squared_distances(points, centroids)
    labels = distances.argmin(axis=1)
    return labels, distances[np.arange(len(points)), labels]


def objective(points, centroids):
    return float(assign(points, centroids)[1].mean())


def _lloyd_step(points, labels, centroids, spherical):
    updated = centroids.copy()
    for k in range(len(centroids)):
        members = points[labels == k]
        if len(members):
            updated[k] = members.mean(axis=0)
    return _normalize(updated) if spherical else updated


def _reseed_empty(points, centroids, spherical):
    """Пустые кластеры получают самую дальнюю от своего центра точку."""
    labels, distances = assign(points, centroids)
    counts = np.bincount(labels, minlength=len(centroids))
    reseeded = 0
    for k in np.flatnonzero(counts == 0):
        farthest = int(distances.argmax())
        centroids[k] = points[farthest]
        distances[farthest] = -1.0
        reseeded += 1
        logger.info("Пустой кластер %d пересеян самой дальней точкой", k)
    if reseeded and spherical:
        centroids = _normalize(centroids)
    return centroids, reseeded


def _run(points, k, cfg, rng, spherical):
    pool_size = cfg.batch_size * 4
    seed_pool = points if len(points) <= pool_size else points[rng.choice(len(points), pool_size, replace=False)]
    centroids, _ = kmeans_plusplus(seed_pool, k, random_state=int(rng.integers(2 ** 31 - 1)))
    centroids = _normalize(centroids) if spherical else centroids.astype(np.float64)
    current = objective(points, centroids)
    history = [current]
    counts = np.zeros(k)
    reseeded = 0
    for _ in range(cfg.iters):
        if cfg.full_batch or len(points) <= cfg.batch_size:
            labels, _ = assign(points, centroids)
            candidate = _lloyd_step(points, labels, centroids, spherical)
        else:
            batch = points[rng.choice(len(points), cfg.batch_size, replace=False)]
            labels, _ = assign(batch, centroids)
            candidate = centroids.copy()
            for cluster in range(k):
                members = batch[labels == cluster]
                if not len(members):
                    continue
                counts[cluster] += len(members)
                rate = len(members) / counts[cluster]
                candidate[cluster] = (1.0 - rate) * candidate[cluster] + rate * members.mean(axis=0)
            if spherical:
                candidate = _normalize(candidate)
        candidate, extra = _reseed_empty(points, candidate, spherical)
        value = objective(points, candidate)
        # шаг принимается, только если целевая функция не растёт
        if value <= current:
            centroids, current = candidate, value
            reseeded += extra
        history.append(current)

    labels, _ = assign(points, centroids)
    refined = _lloyd_step(points, labels, centroids, spherical)
    value = objective(points, refined)
    if value <= current:
        centroids, current = refined, value
    history.append(current)
    return centroids, current, history, reseeded


def minibatch_kmeans(fields, k, cfg=KMeansConfig(), seed=0, spherical=True):
    """Mini-batch K-means по потоку массивов признаков (n_i x C).

    Возвращает центры, метки для каждого массива, значение и историю целевой функции
    (средний квадрат расстояния до своего центра).
    """
    chunks = [np.asarray(chunk, dtype=np.float64) for chunk in fields]
    sizes = [len(chunk) for chunk in chunks]
    points = np.concatenate(chunks) if chunks else np.empty((0, 0))
    if len(points) < k:
        raise EmptyInputError(f"для K-means с K={k} нужно не меньше {k} векторов, получено {len(points)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(cfg.n_init, 1)):
        run = _run(points, k, cfg, rng, spherical)
        if best is None or run[1] < best[1]:
            best = run
    centroids, value, history, reseeded = best
    labels, _ = assign(points, centroids)
    return KMeansResult(
        centroids=centroids,
        labels=np.split(labels, np.cumsum(sizes)[:-1]),
        objective=value,
        history=tuple(history),
        reseeded=reseeded,
    )
