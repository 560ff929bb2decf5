import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from functools import partial

import numpy as np
from tqdm import tqdm

from cloud.exceptions import ConfigurationError, EmptyInputError, MalformedFileError, TrainingDivergedError
from cloud.services import project_to_range_image
from correspond.models import PairKind
from correspond.services import positions_of, sample_pair
from learn.augment import IDENTITY, random_transform
from learn.clustering import assign, minibatch_kmeans
from learn.losses import discriminative_loss, proto_ce_loss, spatiotemporal_loss, within_cross_losses
from learn.models import MODES, EmbeddingNet, PreparedView, TrainConfig, TrainingSample, TrainResult
from learn.network import backward, forward, prepare_input
from learn.optim import Adam, step_decay

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LSEGCKPT"
CHECKPOINT_VERSION = 1
SAMPLE_ATTEMPTS = 200


def prepare_view(cloud, preset, transform=IDENTITY, groups=None):
    """Аугментация, проекция и таблица «исходный номер точки -> строка вида»."""
    augmented = transform.apply(cloud)
    rv = project_to_range_image(augmented, preset.height, preset.width, preset.fov)
    pixels = np.flatnonzero(rv.valid_mask)
    owners = rv.point_index.reshape(-1)[pixels]
    owner_ids = augmented.point_ids[owners]
    size = int(cloud.point_ids.max()) + 1 if len(cloud) else 0
    lookup = np.full(size, -1, dtype=np.int64)
    lookup[owner_ids] = np.arange(len(owner_ids))
    view_groups = None
    if groups is not None:
        view_groups = np.asarray(groups)[positions_of(cloud, owner_ids)]
    return PreparedView((prepare_input(rv), rv.valid_mask), owner_ids, lookup, view_groups)


def _pair_rows(view_a, view_b, ids_a, ids_b):
    rows_a = view_a.rows_of(ids_a)
    rows_b = view_b.rows_of(ids_b)
    kept = (rows_a >= 0) & (rows_b >= 0)
    return rows_a[kept], rows_b[kept]


def build_samples(sequences, cfg, rng):
    """Фиксированный набор обучающих пар видов на весь прогон."""
    if cfg.mode not in MODES:
        raise ConfigurationError(f"неизвестный режим обучения '{cfg.mode}', допустимы: {', '.join(MODES)}")
    samples = []
    for _ in range(cfg.samples):
        index = int(rng.integers(len(sequences)))
        sequence = sequences[index]
        groups = sequence.groups if cfg.mode == "st+dloss" else None
        if cfg.mode == "baseline":
            t = s = int(rng.integers(len(sequence)))
            corr = None
        else:
            t, s, corr = _draw_pair(sequence, rng)
        view_a = prepare_view(sequence.frames[t], sequence.preset, random_transform(rng, cfg.augment),
                              None if groups is None else groups[t])
        view_b = prepare_view(sequence.frames[s], sequence.preset, random_transform(rng, cfg.augment),
                              None if groups is None else groups[s])
        if corr is None:
            shared = np.intersect1d(view_a.owner_ids, view_b.owner_ids)
            rows_a, rows_b = _pair_rows(view_a, view_b, shared, shared)
        else:
            kinds = corr.kinds == PairKind.STATIC if cfg.mode == "ego" else np.ones(len(corr), dtype=bool)
            rows_a, rows_b = _pair_rows(view_a, view_b, corr.ids_a[kinds], corr.ids_b[kinds])
        samples.append(TrainingSample(index, t, s, view_a, view_b, rows_a, rows_b))
    return samples


def _draw_pair(sequence, rng):
    intervals = sorted({a - b for a, b in sequence.correspondences})
    if not intervals:
        raise EmptyInputError("нет кэша соответствий: сначала выполните автолейблинг")
    for _ in range(SAMPLE_ATTEMPTS):
        t, s = sample_pair(len(sequence), rng, intervals)
        corr = sequence.correspondences.get((t, s))
        if corr is not None and not corr.low_quality:
            return t, s, corr
    raise EmptyInputError("не удалось выбрать пару кадров с достаточным покрытием соответствий")


def _cluster_views(net, samples, cfg, pool):
    vectors_a = list(pool.map(lambda sample: forward(net, sample.view_a.inputs).vectors(), samples))
    vectors_b = list(pool.map(lambda sample: forward(net, sample.view_b.inputs).vectors(), samples))
    first = minibatch_kmeans(vectors_a, cfg.k, cfg.kmeans, seed=cfg.seed)
    second = minibatch_kmeans(vectors_b, cfg.k, cfg.kmeans, seed=cfg.seed + 1)
    return first, second


def scatter_rows(field, grad_rows):
    upstream = np.zeros(field.features.shape)
    upstream[field.valid_mask] = grad_rows
    return upstream


def sample_step(net, cfg, centroids_a, centroids_b, sample, labels_a, labels_b):
    """Потери одного образца и градиенты параметров."""
    field_a = forward(net, sample.view_a.inputs)
    field_b = forward(net, sample.view_b.inputs)
    f_a, f_b = field_a.vectors(), field_b.vectors()
    tau = cfg.temperature
    if cfg.mode == "baseline":
        terms = within_cross_losses(f_a, f_b, sample.rows_a, sample.rows_b, labels_a, labels_b,
                                    centroids_a, centroids_b, tau)
        values, grad_a, grad_b = dict(terms.values), terms.grad_a, terms.grad_b
    else:
        within_a, grad_a = proto_ce_loss(f_a, labels_a, centroids_a, tau)
        within_b, grad_b = proto_ce_loss(f_b, labels_b, centroids_b, tau)
        st, st_a, st_b = spatiotemporal_loss(f_a, f_b, sample.rows_a, sample.rows_b, labels_a, labels_b,
                                             centroids_a, centroids_b, tau)
        values = {"within": within_a + within_b, "st": st}
        total = cfg.alpha * values["within"] + cfg.beta * st
        grad_a = cfg.alpha * grad_a + cfg.beta * st_a
        grad_b = cfg.alpha * grad_b + cfg.beta * st_b
        if cfg.mode == "st+dloss" and sample.view_a.groups is not None:
            d_a, dg_a = discriminative_loss(f_a, sample.view_a.groups, cfg.delta_v, cfg.delta_d)
            d_b, dg_b = discriminative_loss(f_b, sample.view_b.groups, cfg.delta_v, cfg.delta_d)
            values["dloss"] = d_a + d_b
            total += cfg.gamma_w * values["dloss"]
            grad_a = grad_a + cfg.gamma_w * dg_a
            grad_b = grad_b + cfg.gamma_w * dg_b
        values["total"] = total
    grads = backward(net, field_a, scatter_rows(field_a, grad_a))
    for name, value in backward(net, field_b, scatter_rows(field_b, grad_b)).items():
        grads[name] += value
    return values, grads


def dump_diverged(net, dump_dir, epoch):
    if not dump_dir:
        return None
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, "diverged.npz")
    np.savez(path, epoch=epoch, **net.params)
    return path


def train(sequences, cfg=TrainConfig(), log_path=None, dump_dir=None, progress=False):
    """Чередование кластеризации и обучения; возвращает сеть, итоговые центры и журнал."""
    rng = np.random.default_rng(cfg.seed)
    net = EmbeddingNet.initialize(cfg.channels, cfg.hidden, cfg.seed)
    samples = build_samples(sequences, cfg, rng)
    optimizer = Adam(net.params, cfg.lr)
    log = []
    logger.info("Обучение: режим %s, образцов %d, параметров %d", cfg.mode, len(samples), net.parameter_count)
    log_stream = open(log_path, "w") if log_path else None
    try:
        with ThreadPoolExecutor(max_workers=max(cfg.threads, 1)) as pool:
            for epoch in tqdm(range(cfg.epochs), desc="epochs", disable=not progress):
                optimizer.lr = step_decay(cfg.lr, epoch, cfg.epochs, cfg.decay_at, cfg.decay_factor)
                first, second = _cluster_views(net, samples, cfg, pool)
                sums = {}
                order = rng.permutation(len(samples))
                for start in range(0, len(order), cfg.batch_size):
                    batch = [int(i) for i in order[start:start + cfg.batch_size]]
                    step = partial(sample_step, net, cfg, first.centroids, second.centroids)
                    results = list(pool.map(
                        lambda i: step(samples[i], first.labels[i], second.labels[i]), batch
                    ))
                    grads = {name: np.zeros_like(value) for name, value in net.params.items()}
                    for values, sample_grads in results:
                        if not all(math.isfinite(value) for value in values.values()):
                            path = dump_diverged(net, dump_dir, epoch)
                            raise TrainingDivergedError(f"эпоха {epoch}: потеря не конечна, состояние: {path}")
                        for name, value in values.items():
                            sums[name] = sums.get(name, 0.0) + value
                        for name, value in sample_grads.items():
                            grads[name] += value
                    optimizer.step({name: value / len(batch) for name, value in grads.items()})
                record = {"epoch": epoch, "lr": optimizer.lr}
                record.update({name: value / len(samples) for name, value in sums.items()})
                record["kmeans_objective"] = [first.objective, second.objective]
                record["kmeans_history"] = [list(first.history), list(second.history)]
                log.append(record)
                if log_stream:
                    log_stream.write(json.dumps(record) + "\n")
                    log_stream.flush()
                logger.info("Эпоха %d: потеря %.4f, lr %.4g", epoch, record.get("total", 0.0), optimizer.lr)
    finally:
        if log_stream:
            log_stream.close()

    centroids = final_centroids(net, sequences, cfg)
    return TrainResult(net, centroids, log)


def final_centroids(net, sequences, cfg):
    """Центры по признакам неаугментированных кадров всех последовательностей."""
    vectors = [
        forward(net, prepare_view(frame, sequence.preset).inputs).vectors()
        for sequence in sequences for frame in sequence.frames
    ]
    return minibatch_kmeans(vectors, cfg.k, cfg.kmeans, seed=cfg.seed).centroids


def segment(net, cloud, centroids, preset):
    """Кластер для каждой точки облака: точки без своего пикселя получают метку пикселя."""
    rv = project_to_range_image(cloud, preset.height, preset.width, preset.fov)
    field = forward(net, rv)
    pixel_labels = np.zeros(rv.height * rv.width, dtype=np.int64)
    if field.valid_mask.any():
        pixel_labels[field.valid_pixels()] = assign(field.vectors(), centroids)[0]
    return np.where(rv.point_pixels >= 0, pixel_labels[np.maximum(rv.point_pixels, 0)], 0)


def save_checkpoint(path, net, centroids, config=None):
    """Заголовок (магия, версия, JSON с формами тензоров и конфигурацией) и тензоры float32 LE."""
    tensors = dict(net.params)
    tensors["centroids"] = np.asarray(centroids)
    header = json.dumps({
        "output": net.output,
        "tensors": [[name, list(value.shape)] for name, value in tensors.items()],
        "config": config or {},
    }).encode("utf-8")
    with open(path, "wb") as stream:
        stream.write(CHECKPOINT_MAGIC)
        stream.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        stream.write(header)
        for value in tensors.values():
            stream.write(np.asarray(value, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as stream:
        raw = stream.read()
    prefix = len(CHECKPOINT_MAGIC) + struct.calcsize("<HI")
    if len(raw) < prefix or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise MalformedFileError(f"{path}: не является чекпоинтом")
    version, header_size = struct.unpack("<HI", raw[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise MalformedFileError(f"{path}: неподдерживаемая версия чекпоинта {version}")
    try:
        header = json.loads(raw[prefix:prefix + header_size].decode("utf-8"))
    except ValueError as error:
        raise MalformedFileError(f"{path}: повреждён заголовок чекпоинта") from error
    offset = prefix + header_size
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        chunk = raw[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise MalformedFileError(f"{path}: чекпоинт обрезан на тензоре {name}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        offset += 4 * count
    centroids = tensors.pop("centroids")
    return EmbeddingNet(tensors, header.get("output", "normalize")), centroids, header.get("config", {})
