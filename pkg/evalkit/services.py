import logging

import numpy as np

from cloud.exceptions import EmptyInputError, LabelMismatchError
from evalkit.models import ConfusionMatrix
from tracking.services import solve_assignment

logger = logging.getLogger(__name__)


def accumulate(conf, pred, truth, ignore=()):
    """Добавляет пары (кластер, класс) к матрице; точки игнорируемых классов пропускаются."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if len(pred) != len(truth):
        raise LabelMismatchError(f"предсказаний {len(pred)}, истинных меток {len(truth)}")
    kept = ~np.isin(truth, list(ignore))
    pred, truth = pred[kept], truth[kept]
    if len(pred) and (pred.min() < 0 or pred.max() >= conf.clusters):
        raise LabelMismatchError(f"номер кластера вне диапазона [0, {conf.clusters})")
    if len(truth) and (truth.min() < 0 or truth.max() >= conf.classes):
        raise LabelMismatchError(f"номер класса вне диапазона [0, {conf.classes})")
    counts = np.bincount(pred * conf.classes + truth, minlength=conf.clusters * conf.classes)
    return ConfusionMatrix(conf.counts + counts.reshape(conf.clusters, conf.classes))


def _evaluated(conf, classes):
    if classes is None:
        return np.arange(conf.classes)
    return np.asarray(sorted(set(int(c) for c in classes)), dtype=np.int64)


def map_clusters_to_classes(conf, classes=None):
    """Кластер -> класс: венгерский метод при K_pred = числу классов, иначе голосование большинством.

    classes ограничивает набор классов, на которые можно отображать кластеры.
    """
    if conf.total == 0:
        raise EmptyInputError("пустая матрица ошибок")
    classes = _evaluated(conf, classes)
    counts = conf.counts[:, classes]
    if conf.clusters == len(classes):
        pairs = solve_assignment(counts.max() - counts)
        mapping = np.zeros(conf.clusters, dtype=np.int64)
        for cluster, column in pairs:
            mapping[cluster] = classes[column]
        return mapping
    return classes[counts.argmax(axis=1)]


def class_confusion(conf, mapping):
    """Матрица класс x класс после отображения кластеров."""
    mapping = np.asarray(mapping, dtype=np.int64)
    if len(mapping) != conf.clusters:
        raise LabelMismatchError(f"отображение задано для {len(mapping)} кластеров из {conf.clusters}")
    merged = np.zeros((conf.classes, conf.classes), dtype=np.int64)
    np.add.at(merged, mapping, conf.counts)
    return merged


def miou(conf, mapping, classes=None):
    """IoU по классам и их среднее; классы с TP + FP + FN = 0 в среднее не входят (IoU = None)."""
    merged = class_confusion(conf, mapping)
    tp = np.diag(merged)
    fp = merged.sum(axis=1) - tp
    fn = merged.sum(axis=0) - tp
    per_class = {}
    for c in _evaluated(conf, classes):
        union = tp[c] + fp[c] + fn[c]
        per_class[int(c)] = float(tp[c] / union) if union else None
    present = [value for value in per_class.values() if value is not None]
    if not present:
        raise EmptyInputError("ни один из оцениваемых классов не встречается")
    return per_class, float(np.mean(present))


def evaluate(pairs, clusters, classes, ignore=(), class_names=None):
    """Полный отчёт по потоку пар (pred, truth): матрица, отображение, IoU."""
    conf = ConfusionMatrix.zeros(clusters, classes)
    for pred, truth in pairs:
        conf = accumulate(conf, pred, truth, ignore)
    evaluated = [c for c in range(classes) if c not in set(ignore)]
    mapping = map_clusters_to_classes(conf, evaluated)
    per_class, mean = miou(conf, mapping, evaluated)
    logger.info("mIoU %.4f по %d точкам", mean, conf.total)
    return metrics_report(conf, mapping, per_class, mean, class_names)


def metrics_report(conf, mapping, per_class, mean, class_names=None):
    names = class_names or {}
    return {
        "miou": mean,
        "per_class_iou": {names.get(c, str(c)): value for c, value in per_class.items()},
        "mapping": {str(cluster): int(target) for cluster, target in enumerate(mapping)},
        "point_counts": {
            "total": conf.total,
            "per_class": {names.get(c, str(c)): int(conf.counts[:, c].sum()) for c in per_class},
        },
    }
