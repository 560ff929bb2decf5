import logging

import numpy as np
from scipy.special import log_softmax, softmax

from cloud.exceptions import EmptyInputError
from learn.models import Group, LossTerms

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


def proto_ce_loss(features, labels, centroids, temperature=1.0):
    """Кросс-энтропия прототипного классификатора с логитами -d(z, μ)/τ, d = 1 - cos.

    Возвращает (среднее по точкам, градиент по features).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(features)
    if n == 0:
        return 0.0, np.zeros_like(features)
    centroids = np.asarray(centroids, dtype=np.float64)
    f_norm = np.maximum(np.linalg.norm(features, axis=1, keepdims=True), NORM_FLOOR)
    c_norm = np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), NORM_FLOOR)
    unit_c = centroids / c_norm
    cosine = (features / f_norm) @ unit_c.T
    logits = (cosine - 1.0) / temperature
    rows = np.arange(n)
    loss = float(-log_softmax(logits, axis=1)[rows, labels].mean())

    d_logits = softmax(logits, axis=1)
    d_logits[rows, labels] -= 1.0
    d_cosine = d_logits / (temperature * n)
    # d cos / d z = μ̂/‖z‖ - cos · z/‖z‖²
    grad = (d_cosine @ unit_c) / f_norm - (d_cosine * cosine).sum(axis=1, keepdims=True) * features / f_norm ** 2
    return loss, grad


def paired_ce(f_a, f_b, rows_a, rows_b, labels_a, labels_b, centroids_a, centroids_b, temperature=1.0):
    """Перекрёстная CE по парам строк: вид a против меток/центров b и наоборот."""
    loss_a, grad_rows_a = proto_ce_loss(f_a[rows_a], labels_b[rows_b], centroids_b, temperature)
    loss_b, grad_rows_b = proto_ce_loss(f_b[rows_b], labels_a[rows_a], centroids_a, temperature)
    grad_a = np.zeros_like(f_a)
    grad_b = np.zeros_like(f_b)
    np.add.at(grad_a, rows_a, grad_rows_a)
    np.add.at(grad_b, rows_b, grad_rows_b)
    return loss_a + loss_b, grad_a, grad_b


def within_cross_losses(f_a, f_b, rows_a, rows_b, labels_a, labels_b, centroids_a, centroids_b, temperature=1.0):
    """Согласованность внутри видов и между видами одного кадра.

    rows_a/rows_b: строки двух видов, отождествлённые через общие исходные точки.
    """
    if not len(rows_a):
        raise EmptyInputError("у двух видов нет общих точек")
    within_a, grad_a = proto_ce_loss(f_a, labels_a, centroids_a, temperature)
    within_b, grad_b = proto_ce_loss(f_b, labels_b, centroids_b, temperature)
    cross, cross_a, cross_b = paired_ce(f_a, f_b, rows_a, rows_b, labels_a, labels_b,
                                        centroids_a, centroids_b, temperature)
    within = within_a + within_b
    return LossTerms(
        {"within": within, "cross": cross, "total": within + cross},
        grad_a + cross_a,
        grad_b + cross_b,
    )


def spatiotemporal_loss(f_t, f_tk, rows_t, rows_tk, labels_t, labels_tk, centroids_t, centroids_tk,
                        temperature=1.0):
    """Потеря по соответствиям кадров t и t-k; пустой набор пар даёт 0."""
    if not len(rows_t):
        logger.warning("Пустой набор соответствий, пространственно-временная потеря равна 0")
        return 0.0, np.zeros_like(f_t), np.zeros_like(f_tk)
    return paired_ce(f_t, f_tk, rows_t, rows_tk, labels_t, labels_tk, centroids_t, centroids_tk, temperature)


def discriminative_loss(features, groups, delta_v=0.5, delta_d=1.5):
    """Притяжение к среднему своей группы и отталкивание средних разных групп.

    Точки с группой NONE не участвуют. Возвращает (loss, градиент по features).
    """
    features = np.asarray(features, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.int64)
    grad = np.zeros_like(features)
    present = [g for g in np.unique(groups) if g != Group.NONE]
    if not present:
        return 0.0, grad

    members = [np.flatnonzero(groups == g) for g in present]
    means = np.array([features[rows].mean(axis=0) for rows in members])

    pull = 0.0
    for rows, mean in zip(members, means):
        offsets = features[rows] - mean
        dist = np.linalg.norm(offsets, axis=1)
        hinge = np.maximum(dist - delta_v, 0.0)
        pull += (hinge ** 2).mean() / len(members)
        scale = np.where(dist > 0, 2.0 * hinge / np.maximum(dist, NORM_FLOOR), 0.0)
        direct = scale[:, None] * offsets / (len(rows) * len(members))
        grad[rows] += direct - direct.sum(axis=0) / len(rows)

    push = 0.0
    pairs = [(i, j) for i in range(len(members)) for j in range(i + 1, len(members))]
    for i, j in pairs:
        delta = means[i] - means[j]
        dist = np.linalg.norm(delta)
        hinge = max(2.0 * delta_d - dist, 0.0)
        push += hinge ** 2 / len(pairs)
        if hinge > 0 and dist > 0:
            d_mean = -2.0 * hinge * delta / (dist * len(pairs))
            grad[members[i]] += d_mean / len(members[i])
            grad[members[j]] -= d_mean / len(members[j])
    return float(pull + push), grad


def assign_groups(size, ground_mask, dynamic_boxes, static_boxes, positions, v_split=3.0):
    """Группа каждой точки кадра.

    positions(ids) переводит исходные номера точек в позиции облака. Земля -> GROUND,
    члены динамических боксов объёмом меньше v_split -> SMALL_DYNAMIC, члены статических
    кластеров объёмом не меньше v_split -> LARGE_STATIC, остальные -> NONE.
    """
    groups = np.full(size, Group.NONE, dtype=np.int64)
    for box in static_boxes:
        if box.volume >= v_split:
            groups[positions(box.point_ids)] = Group.LARGE_STATIC
    for box in dynamic_boxes:
        if box.volume < v_split:
            groups[positions(box.point_ids)] = Group.SMALL_DYNAMIC
    groups[np.asarray(ground_mask, dtype=bool)] = Group.GROUND
    return groups
