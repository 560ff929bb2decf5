import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from functools import partial

import numpy as np
from tqdm import tqdm

from cascade.models import (
    CASCADE_CLASS_NAMES,
    GROUPINGS,
    VARIANTS,
    CascadeClass,
    CascadeConfig,
    CascadeResult,
    FgBgLabel,
    FgBgModel,
    FgBgPseudoLabel,
    FgBgSample,
)
from cloud.exceptions import ConfigurationError, EmptyInputError, TrainingDivergedError
from cloud.services import project_to_range_image
from correspond.models import CorrespondenceSet, PairKind
from correspond.services import positions_of
from dynamics.services import cluster_static, fit_box, split_dynamic
from evalkit.models import ConfusionMatrix
from evalkit.services import accumulate, evaluate, map_clusters_to_classes, metrics_report, miou
from learn.augment import random_transform
from learn.models import EmbeddingNet, TrainingSequence
from learn.network import backward, forward
from learn.optim import Adam, step_decay
from learn.services import dump_diverged, prepare_view, scatter_rows, segment, train

logger = logging.getLogger(__name__)

# Истинная метка, не участвующая в оценке (непомеченные точки)
IGNORED = -1


def simple_threshold_labels(field, epsilon=0.5, size=None):
    """score >= ε -> передний план, остальное -> фон.

    Точки вне поля оценок (земля и выбросы) относятся к фону, как и припаркованные машины.
    """
    if size is None:
        size = int(field.point_ids.max()) + 1 if len(field) else 0
    labels = np.full(size, FgBgLabel.BACKGROUND, dtype=np.uint8)
    labels[field.point_ids[split_dynamic(field, epsilon)]] = FgBgLabel.FOREGROUND
    return FgBgPseudoLabel(labels, field.frame, "dynamic")


def bottom_gap(box, plane):
    bottom = box.center - np.array([0.0, 0.0, box.height / 2])
    return float(plane.distance(bottom))


def heuristic_labels(cloud, field, plane, cfg=CascadeConfig()):
    """Псевдометки с учётом стоящих машин.

    Динамические точки -> передний план. Статические точки кластеризуются DBSCAN; кластер,
    чей бокс по размерам похож на машину и стоит на земле (низ бокса не дальше ground_gap
    от плоскости), помечается как неопределённый. Остальное -> фон.
    """
    labels = simple_threshold_labels(field, cfg.epsilon, len(cloud) + cloud.dropped).labels.copy()
    if plane is None:
        logger.warning("Кадр %d: плоскость земли не найдена, неопределённые точки не выделяются", field.frame)
        return FgBgPseudoLabel(labels, field.frame, "heuristic")
    static_ids = field.point_ids[~split_dynamic(field, cfg.epsilon)]
    xyz = cloud.xyz[positions_of(cloud, static_ids)]
    parked = 0
    for cluster in cluster_static(xyz, cfg.static_eps, cfg.static_min_pts):
        if len(cluster) < 3:
            continue
        box = fit_box(xyz[cluster], static_ids[cluster], field.frame)
        if cfg.is_car_sized(box) and bottom_gap(box, plane) <= cfg.ground_gap:
            labels[box.point_ids] = FgBgLabel.UNCERTAIN
            parked += 1
    logger.debug("Кадр %d: стоящих машин %d", field.frame, parked)
    return FgBgPseudoLabel(labels, field.frame, "heuristic")


def pseudo_labels(aligned, fields, cfg=CascadeConfig()):
    """Псевдометки всех кадров последовательности для выбранного варианта."""
    if cfg.variant == "dynamic":
        return [
            simple_threshold_labels(field, cfg.epsilon, len(cloud) + cloud.dropped)
            for cloud, field in zip(aligned.originals, fields)
        ]
    if cfg.variant == "heuristic":
        return [
            heuristic_labels(cloud, field, plane, cfg)
            for cloud, field, plane in zip(aligned.originals, fields, aligned.planes)
        ]
    raise ConfigurationError(f"у варианта '{cfg.variant}' нет псевдометок фон/передний план")


def rmse_loss(outputs, targets):
    """Корень из среднего квадрата ошибки и его градиент по outputs."""
    diff = np.asarray(outputs, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    if not len(diff):
        return 0.0, diff
    loss = math.sqrt(float(np.mean(diff ** 2)))
    if loss == 0.0:
        return 0.0, np.zeros_like(diff)
    return loss, diff / (len(diff) * loss)


def fgbg_step(net, threshold, sample):
    """RMSE одного вида без неопределённых точек, счётчики (tp, fp, fn) и градиенты."""
    field = forward(net, sample.view.inputs)
    out = field.vectors()[:, 0]
    known = sample.targets != FgBgLabel.UNCERTAIN
    positive = sample.targets[known] == FgBgLabel.FOREGROUND
    loss, grad = rmse_loss(out[known], positive.astype(np.float64))
    grad_rows = np.zeros((len(out), 1))
    grad_rows[known, 0] = grad
    predicted = out[known] >= threshold
    counts = np.array([
        (predicted & positive).sum(),
        (predicted & ~positive).sum(),
        (~predicted & positive).sum(),
    ], dtype=np.float64)
    return loss, counts, backward(net, field, scatter_rows(field, grad_rows))


def train_fgbg(frames, labels, preset, cfg=CascadeConfig(), dump_dir=None, progress=False):
    """Бинарная модель фон/передний план: сигмоида на выходе, RMSE, неопределённые точки не учитываются."""
    foreground = sum(label.count(FgBgLabel.FOREGROUND) for label in labels)
    background = sum(label.count(FgBgLabel.BACKGROUND) for label in labels)
    if not foreground or not background:
        missing = "переднего плана" if not foreground else "фона"
        raise EmptyInputError(
            f"в псевдометках нет точек {missing} (передний план {foreground}, фон {background}): "
            f"проверьте порог ε и результаты авторазметки"
        )
    rng = np.random.default_rng(cfg.seed)
    net = EmbeddingNet.initialize(channels=1, hidden=cfg.hidden, seed=cfg.seed, output="sigmoid")
    samples = []
    for _ in range(cfg.samples):
        t = int(rng.integers(len(frames)))
        view = prepare_view(frames[t], preset, random_transform(rng, cfg.augment))
        samples.append(FgBgSample(view, labels[t].labels[view.owner_ids]))

    optimizer = Adam(net.params, cfg.lr)
    log = []
    logger.info("Обучение фон/передний план: образцов %d, точек переднего плана %d, фона %d",
                len(samples), foreground, background)
    with ThreadPoolExecutor(max_workers=max(cfg.threads, 1)) as pool:
        for epoch in tqdm(range(cfg.epochs), desc="fg/bg epochs", disable=not progress):
            optimizer.lr = step_decay(cfg.lr, epoch, cfg.epochs, cfg.decay_at, cfg.decay_factor)
            order = rng.permutation(len(samples))
            loss_sum, tally = 0.0, np.zeros(3)
            for start in range(0, len(order), cfg.batch_size):
                batch = [samples[int(i)] for i in order[start:start + cfg.batch_size]]
                results = list(pool.map(partial(fgbg_step, net, cfg.threshold), batch))
                grads = {name: np.zeros_like(value) for name, value in net.params.items()}
                for loss, counts, sample_grads in results:
                    if not math.isfinite(loss):
                        path = dump_diverged(net, dump_dir, epoch)
                        raise TrainingDivergedError(f"эпоха {epoch}: RMSE не конечна, состояние: {path}")
                    loss_sum += loss
                    tally += counts
                    for name, value in sample_grads.items():
                        grads[name] += value
                optimizer.step({name: value / len(batch) for name, value in grads.items()})
            union = tally.sum()
            record = {
                "epoch": epoch,
                "lr": optimizer.lr,
                "rmse": loss_sum / len(samples),
                "iou": float(tally[0] / union) if union else None,
            }
            log.append(record)
            logger.info("Эпоха %d: RMSE %.4f", epoch, record["rmse"])
    return FgBgModel(net, cfg.threshold, log)


def predict_foreground(model, cloud, preset):
    """Передний план для каждой точки облака; точка без своего пикселя получает ответ пикселя."""
    rv = project_to_range_image(cloud, preset.height, preset.width, preset.fov)
    field = forward(model.net, rv)
    pixel_foreground = np.zeros(rv.height * rv.width, dtype=bool)
    if field.valid_mask.any():
        pixel_foreground[field.valid_pixels()] = field.vectors()[:, 0] >= model.threshold
    return np.where(rv.point_pixels >= 0, pixel_foreground[np.maximum(rv.point_pixels, 0)], False)


def foreground_sequence(sequence, masks):
    """Только точки переднего плана; из соответствий остаются динамические пары внутри переднего плана."""
    frames = tuple(cloud.subset(mask) for cloud, mask in zip(sequence.frames, masks))
    correspondences = {}
    for key, corr in sequence.correspondences.items():
        keep = (
            (corr.kinds == PairKind.DYNAMIC)
            & np.isin(corr.ids_a, frames[corr.frame_a].point_ids)
            & np.isin(corr.ids_b, frames[corr.frame_b].point_ids)
        )
        if keep.any():
            correspondences[key] = CorrespondenceSet(
                corr.frame_a, corr.frame_b, corr.ids_a[keep], corr.ids_b[keep], corr.kinds[keep],
                corr.coverage, corr.low_quality,
            )
    return TrainingSequence(frames, sequence.preset, correspondences)


def cascade_segment(model, sequences, cfg=CascadeConfig(), progress=False):
    """Фон по бинарной модели, затем кластеризация переднего плана на K=2 кластера.

    Метки кадров: 0: фон, 1 и 2: кластеры переднего плана.
    """
    masks = [[predict_foreground(model, cloud, sequence.preset) for cloud in sequence.frames]
             for sequence in sequences]
    labels = [[np.zeros(len(cloud), dtype=np.int64) for cloud in sequence.frames] for sequence in sequences]
    total = sum(int(mask.sum()) for frame_masks in masks for mask in frame_masks)
    if total < 2:
        logger.warning("Передний план пуст: все точки отнесены к фону")
        return CascadeResult(labels, masks)

    foreground = [foreground_sequence(sequence, frame_masks) for sequence, frame_masks in zip(sequences, masks)]
    mode = cfg.learn.mode
    usable = any(not corr.low_quality for sequence in foreground for corr in sequence.correspondences.values())
    if mode != "baseline" and not usable:
        logger.warning("Нет динамических соответствий внутри переднего плана, второй этап обучается в режиме baseline")
        mode = "baseline"
    result = train(foreground, replace(cfg.learn, mode=mode, k=2), progress=progress)
    for s, sequence in enumerate(foreground):
        for t, cloud in enumerate(sequence.frames):
            if len(cloud):
                labels[s][t][masks[s][t]] = segment(result.net, cloud, result.centroids, sequence.preset) + 1
    return CascadeResult(labels, masks, result)


def single_shot_segment(sequences, cfg=CascadeConfig(), progress=False):
    """Базовый вариант без каскада: обычный пайплайн learn с K=3 по всем точкам."""
    result = train(sequences, replace(cfg.learn, k=3), progress=progress)
    labels = [[segment(result.net, cloud, result.centroids, sequence.preset) for cloud in sequence.frames]
              for sequence in sequences]
    return CascadeResult(labels, None, result)


def run_cascade(model, sequences, cfg=CascadeConfig(), progress=False):
    if cfg.variant not in VARIANTS:
        raise ConfigurationError(f"неизвестный вариант каскада '{cfg.variant}', допустимы: {', '.join(VARIANTS)}")
    if cfg.variant == "single-shot":
        return single_shot_segment(sequences, cfg, progress)
    return cascade_segment(model, sequences, cfg, progress)


def group_truth(classes, grouping="synthetic"):
    """Истинные классы -> {фон, транспорт, люди}; непомеченные точки (класс 0) не оцениваются."""
    if grouping not in GROUPINGS:
        raise ConfigurationError(f"неизвестная группировка классов '{grouping}'")
    classes = np.asarray(classes, dtype=np.int64)
    groups = np.full(len(classes), CascadeClass.BACKGROUND, dtype=np.int64)
    for source, target in GROUPINGS[grouping].items():
        groups[classes == source] = target
    groups[classes == 0] = IGNORED
    return groups


def fgbg_report(pairs):
    """IoU фона и переднего плана по потоку пар (передний план предсказан, группа истины)."""
    conf = ConfusionMatrix.zeros(2, 2)
    for predicted, groups in pairs:
        groups = np.asarray(groups)
        truth = np.where(groups == IGNORED, IGNORED, groups > 0)
        conf = accumulate(conf, np.asarray(predicted, dtype=np.int64), truth, ignore={IGNORED})
    mapping = np.array([0, 1])
    per_class, mean = miou(conf, mapping)
    return metrics_report(conf, mapping, per_class, mean, {0: "background", 1: "foreground"})


def cascade_report(pairs, variant="heuristic"):
    """Три класса: фон каскада фиксирован, два кластера отображаются на транспорт и людей."""
    names = {int(key): value for key, value in CASCADE_CLASS_NAMES.items()}
    if variant == "single-shot":
        return evaluate(pairs, 3, 3, ignore={IGNORED}, class_names=names)
    conf = ConfusionMatrix.zeros(3, 3)
    for pred, truth in pairs:
        conf = accumulate(conf, pred, truth, ignore={IGNORED})
    mapping = np.array([CascadeClass.BACKGROUND, CascadeClass.VEHICLE, CascadeClass.PEOPLE], dtype=np.int64)
    foreground = ConfusionMatrix(conf.counts[1:])
    if foreground.total:
        mapping[1:] = map_clusters_to_classes(foreground, [CascadeClass.VEHICLE, CascadeClass.PEOPLE])
    per_class, mean = miou(conf, mapping)
    logger.info("Каскад (%s): mIoU %.4f", variant, mean)
    return metrics_report(conf, mapping, per_class, mean, names)


def apply_mapping(labels, report):
    """Кластеры -> классы каскада по отображению из отчёта."""
    mapping = np.array([report["mapping"][str(cluster)] for cluster in range(len(report["mapping"]))])
    return mapping[np.asarray(labels, dtype=np.int64)]
