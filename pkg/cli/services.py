import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np
import yaml
from django.conf import settings
from tqdm import tqdm

from cascade.models import CascadeConfig, FgBgLabel
from cascade.services import (
    cascade_report,
    fgbg_report,
    group_truth,
    pseudo_labels,
    run_cascade,
    train_fgbg,
)
from cli.models import Workspace
from cli.serializers import PipelineConfigSerializer
from cloud.exceptions import ConfigurationError, LabelMismatchError, MissingStageError
from cloud.models import SENSOR_PRESETS
from cloud.services import (
    normalize_intensity,
    pair_labels,
    read_kitti_bin,
    read_kitti_label,
    write_kitti_label,
    write_ply,
)
from correspond.models import CorrespondConfig
from correspond.services import (
    build_correspondences,
    candidate_pairs,
    positions_of,
    read_correspondences,
    write_correspondences,
)
from dynamics.models import DynamicScoreField, DynamicsConfig
from dynamics.services import (
    cluster_static,
    detect_frame,
    fit_box,
    read_scores,
    save_boxes,
    write_boxes_csv,
    write_scores,
)
from evalkit.serializers import MetricsReportSerializer
from evalkit.services import evaluate
from learn.losses import assign_groups
from learn.models import AugmentConfig, KMeansConfig, TrainConfig, TrainingSequence
from learn.services import load_checkpoint, save_checkpoint, segment, train
from preprocess.models import AlignConfig, GroundConfig, IcpConfig, SorConfig
from preprocess.services import align_sequence, aligned_from_poses, read_poses, write_poses
from synth.models import CLASS_NAMES, SceneClass
from synth.serializers import SceneSpecSerializer
from synth.services import SCENES, frame_name, random_scene, render_sequence, save_sequence, scene_from_dict
from tracking.models import TrackingConfig
from tracking.services import save_tracks, track_sequence, write_tracks_csv

logger = logging.getLogger(__name__)

# Разделы конфигурации, от которых зависит результат стадии
STAGE_SECTIONS = {
    "synth": ("seed", "dataset", "synth"),
    "align": ("seed", "dataset", "preprocess"),
    "autolabel": ("seed", "dataset", "preprocess", "dynamics", "tracking", "correspond", "learn.v_split"),
    "train": ("seed", "dataset", "learn"),
    "segment": ("dataset",),
    "eval": ("dataset",),
    "cascade": ("seed", "dataset", "preprocess", "learn", "cascade"),
    "benchmark": ("seed", "dataset", "learn"),
}

UPSTREAM = {
    "synth": None,
    "align": "synth",
    "autolabel": "align",
    "train": "autolabel",
    "segment": "train",
    "eval": "segment",
    "cascade": "autolabel",
    "benchmark": "autolabel",
}

STAGE_OUTPUTS = {
    "synth": ("clouds", "labels"),
    "align": ("poses",),
    "autolabel": ("scores", "boxes", "tracks", "corr"),
    "train": ("checkpoint",),
    "segment": ("pred",),
    "eval": ("report",),
    "cascade": ("cascade_report",),
    "benchmark": ("benchmark_report",),
}


def _pool(config):
    return ThreadPoolExecutor(max_workers=max(config["threads"], 1))


# --- конфигурация ---

def apply_override(data, assignment):
    """section.key=value: значение разбирается как YAML-скаляр или список."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"ожидалось section.key=value, получено '{assignment}'")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as error:
        raise ConfigurationError(f"{key}: не удалось разобрать значение '{raw}'") from error
    *path, name = key.split(".")
    node = data
    for part in path:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"{key}: '{part}' не является разделом")
    node[name] = value
    return data


def validate_config(data):
    serializer = PipelineConfigSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigurationError(json.dumps(serializer.errors, ensure_ascii=False))
    return json.loads(json.dumps(serializer.validated_data))


def load_config(path=None, overrides=()):
    """YAML-файл конфигурации, затем переопределения из командной строки."""
    explicit = path is not None
    path = Path(path or settings.PIPELINE_CONFIG)
    data = {}
    if path.exists():
        try:
            with open(path) as stream:
                data = yaml.safe_load(stream) or {}
        except yaml.YAMLError as error:
            raise ConfigurationError(f"{path}: {error}") from error
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: ожидался словарь разделов")
    elif explicit:
        raise ConfigurationError(f"файл конфигурации {path} не найден")
    for assignment in overrides:
        apply_override(data, assignment)
    return validate_config(data)


def _section(config, name):
    node = config
    for part in name.split("."):
        node = node[part]
    return node


def config_hash(config, sections, upstream=""):
    """SHA-256 канонического JSON выбранных разделов и хэша предыдущей стадии."""
    payload = {"sections": {name: _section(config, name) for name in sections}, "upstream": upstream}
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def stage_hash(stage, workspace, config):
    upstream = UPSTREAM[stage]
    if stage == "train" and config["learn"]["mode"] == "baseline":
        upstream = "synth"
    return config_hash(config, STAGE_SECTIONS[stage], workspace.upstream_hash(upstream) if upstream else "")


def is_fresh(stage, workspace, digest):
    """Отметка стадии совпадает с хэшем и все её результаты на месте."""
    outputs = [getattr(workspace, name) for name in STAGE_OUTPUTS[stage]]
    return workspace.is_fresh(stage, digest) and all(path.exists() for path in outputs)


def sensor_preset(config):
    return SENSOR_PRESETS[config["dataset"]["sensor"]]


def align_config(config):
    section = config["preprocess"]
    return AlignConfig(
        ground=GroundConfig(**section["ground"], seed=config["seed"]),
        sor=SorConfig(**section["sor"]),
        icp=IcpConfig(**section["icp"]),
        min_points=section["min_points"],
    )


def dynamics_config(config):
    return DynamicsConfig(**config["dynamics"])


def tracking_config(config):
    section = dict(config["tracking"])
    section["weights"] = tuple(section["weights"])
    return TrackingConfig(**section)


def correspond_config(config):
    section = dict(config["correspond"])
    section["intervals"] = tuple(section["intervals"])
    section["icp"] = IcpConfig(**section["icp"])
    return CorrespondConfig(**section)


def train_config(config, **changes):
    section = dict(config["learn"])
    section["augment"] = AugmentConfig(**section["augment"])
    section["kmeans"] = KMeansConfig(**section["kmeans"])
    cfg = TrainConfig(**section, seed=config["seed"], threads=config["threads"])
    return replace(cfg, **changes)


def cascade_config(config):
    section = dict(config["cascade"])
    mode = section.pop("mode")
    for name in ("car_length", "car_width", "car_height"):
        section[name] = tuple(section[name])
    return CascadeConfig(
        **section,
        epsilon=config["dynamics"]["epsilon"],
        seed=config["seed"],
        threads=config["threads"],
        augment=AugmentConfig(**config["learn"]["augment"]),
        learn=train_config(config, mode=mode, k=2),
    )


# --- чтение рабочего каталога ---

def load_clouds(workspace):
    workspace.require("synth", workspace.clouds)
    return [
        normalize_intensity(read_kitti_bin(workspace.clouds / f"{name}.bin", frame_index=t))
        for t, name in enumerate(workspace.frame_names())
    ]


def load_aligned(workspace, config, clouds=None):
    clouds = clouds if clouds is not None else load_clouds(workspace)
    poses = read_poses(workspace.require("align", workspace.poses))
    return aligned_from_poses(clouds, poses, align_config(config), config["threads"])


def corr_path(workspace, a, b):
    return workspace.corr / f"{frame_name(a)}_{frame_name(b)}.corr"


def groups_path(workspace, name):
    return workspace.cache / "groups" / f"{name}.i8"


def load_training_sequence(workspace, config, mode, clouds=None):
    """Кадры и кэши автолейблинга; режиму baseline соответствия не нужны и не читаются."""
    clouds = clouds if clouds is not None else load_clouds(workspace)
    correspondences = {}
    groups = None
    if mode != "baseline":
        workspace.require("autolabel", workspace.corr)
        for path in sorted(workspace.corr.glob("*.corr")):
            corr = read_correspondences(path)
            correspondences[(corr.frame_a, corr.frame_b)] = corr
    if mode == "st+dloss":
        groups = []
        for name, cloud in zip(workspace.frame_names(), clouds):
            path = workspace.require("autolabel", groups_path(workspace, name))
            values = np.fromfile(path, dtype=np.int8).astype(np.int64)
            if len(values) != len(cloud):
                raise LabelMismatchError(f"{path}: групп {len(values)}, точек {len(cloud)}")
            groups.append(values)
        groups = tuple(groups)
    return TrainingSequence(tuple(clouds), sensor_preset(config), correspondences, groups)


def load_truth(workspace, clouds):
    """Истинные классы в позициях облаков."""
    workspace.require("synth", workspace.labels)
    return [
        pair_labels(cloud, read_kitti_label(workspace.labels / f"{name}.label")).semantic
        for name, cloud in zip(workspace.frame_names(), clouds)
    ]


def truth_classes(config, truth):
    if config["dataset"]["labels"] == "synthetic":
        return len(SceneClass), {int(key): value for key, value in CLASS_NAMES.items()}
    return max(int(values.max()) for values in truth if len(values)) + 1, None


def to_file_order(cloud, values, fill=0):
    """Значения по позициям облака -> массив по всем точкам файла (с отброшенными)."""
    full = np.full(len(cloud) + cloud.dropped, fill, dtype=np.int64)
    full[cloud.point_ids] = values
    return full


# --- стадии ---

def scene_for(config):
    section = config["synth"]
    name = section["scene"]
    if name in SCENES:
        return SCENES[name](noise_sigma=section["noise_sigma"])
    if name == "random":
        return random_scene(config["seed"], noise_sigma=section["noise_sigma"])
    path = Path(name)
    if not path.exists():
        raise ConfigurationError(f"сцена '{name}': нет ни встроенной сцены, ни файла с таким именем")
    with open(path) as stream:
        data = yaml.safe_load(stream) or {}
    serializer = SceneSpecSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigurationError(f"{path}: {json.dumps(serializer.errors, ensure_ascii=False)}")
    return scene_from_dict(serializer.validated_data)


def run_synth(workspace, config):
    for sub in ("clouds", "labels", "provenance", "motion"):
        shutil.rmtree(workspace.root / sub, ignore_errors=True)
    frames = render_sequence(scene_for(config), config["synth"]["frames"], config["seed"])
    save_sequence(workspace.root, frames)
    return {"frames": len(frames), "points": sum(len(frame) for frame in frames)}


def run_align(workspace, config):
    clouds = load_clouds(workspace)
    aligned = align_sequence(clouds, align_config(config), config["threads"])
    write_poses(workspace.poses, aligned.poses)
    return {"frames": len(aligned), "excluded": sum(not valid for valid in aligned.valid)}


def static_boxes(aligned, field, mask, cfg):
    """Боксы статических кластеров кадра (для групп дискриминативной потери)."""
    xyz = aligned.aligned(field.frame)[~mask]
    ids = field.point_ids[~mask]
    return [
        fit_box(xyz[cluster], ids[cluster], field.frame)
        for cluster in cluster_static(xyz, cfg.eps, cfg.min_pts) if len(cluster) >= 3
    ]


def run_autolabel(workspace, config, progress=False):
    """Оценки подвижности, боксы, треки, кэши соответствий и группы точек."""
    aligned = load_aligned(workspace, config)
    names = workspace.frame_names()
    dcfg = dynamics_config(config)
    for directory in (workspace.scores, workspace.corr, workspace.cache / "groups"):
        os.makedirs(directory, exist_ok=True)

    with _pool(config) as pool:
        detections = list(pool.map(partial(detect_frame, aligned, cfg=dcfg), range(len(aligned))))
    boxes = [kept for _, _, kept in detections]
    for name, cloud, (field, _, _) in zip(names, aligned.originals, detections):
        write_scores(workspace.scores / f"{name}.f32", field, len(cloud) + cloud.dropped)
    all_boxes = [box for frame_boxes in boxes for box in frame_boxes]
    write_boxes_csv(workspace.boxes, all_boxes)
    save_boxes(workspace.cache / "boxes.npz", all_boxes)

    tracks = track_sequence(boxes, tracking_config(config))
    write_tracks_csv(workspace.tracks, tracks)
    save_tracks(workspace.cache / "tracks.npz", tracks)

    dynamic_ids = {i: field.point_ids[mask] for i, (field, mask, _) in enumerate(detections)}
    ccfg = correspond_config(config)
    pairs = candidate_pairs(len(aligned), ccfg.intervals, aligned.valid)
    for stale in workspace.corr.glob("*.corr"):
        stale.unlink()
    with _pool(config) as pool:
        caches = list(tqdm(
            pool.map(lambda pair: build_correspondences(aligned, tracks, pair[0], pair[1], ccfg, dynamic_ids), pairs),
            total=len(pairs), desc="correspondences", disable=not progress,
        ))
    for corr in caches:
        write_correspondences(corr_path(workspace, corr.frame_a, corr.frame_b), corr)

    v_split = config["learn"]["v_split"]
    for i, (name, cloud) in enumerate(zip(names, aligned.originals)):
        field, mask, kept = detections[i]
        groups = assign_groups(len(cloud), aligned.ground_masks[i], kept,
                               static_boxes(aligned, field, mask, dcfg), partial(positions_of, cloud), v_split)
        groups.astype(np.int8).tofile(groups_path(workspace, name))

    low = sum(corr.low_quality for corr in caches)
    logger.info("Автолейблинг: боксов %d, треков %d, пар кадров %d (некачественных %d)",
                len(all_boxes), len(tracks), len(caches), low)
    return {"boxes": len(all_boxes), "tracks": len(tracks), "pairs": len(caches), "low_quality": low}


def train_model(sequences, config, dump_dir=None, log_path=None, progress=False):
    cfg = train_config(config)
    return train(sequences, cfg, log_path=log_path, dump_dir=dump_dir, progress=progress)


def checkpoint_config(config):
    return {"seed": config["seed"], "dataset": config["dataset"], "learn": config["learn"]}


def run_train(workspace, config, progress=False):
    sequence = load_training_sequence(workspace, config, config["learn"]["mode"])
    os.makedirs(workspace.ckpt, exist_ok=True)
    result = train_model([sequence], config, dump_dir=workspace.ckpt,
                         log_path=workspace.ckpt / "train.jsonl", progress=progress)
    save_checkpoint(workspace.checkpoint, result.net, result.centroids, checkpoint_config(config))
    final = result.log[-1] if result.log else {}
    return {"mode": config["learn"]["mode"], "epochs": len(result.log), "loss": final.get("total")}


def segment_frames(net, centroids, clouds, preset, config):
    with _pool(config) as pool:
        return list(pool.map(lambda cloud: segment(net, cloud, centroids, preset), clouds))


def run_segment(workspace, config, ply=False):
    net, centroids, saved = load_checkpoint(workspace.require("train", workspace.checkpoint))
    preset = SENSOR_PRESETS[saved.get("dataset", config["dataset"])["sensor"]]
    clouds = load_clouds(workspace)
    labels = segment_frames(net, centroids, clouds, preset, config)
    os.makedirs(workspace.pred, exist_ok=True)
    for name, cloud, values in zip(workspace.frame_names(), clouds, labels):
        write_kitti_label(workspace.pred / f"{name}.label", to_file_order(cloud, values))
        if ply:
            write_ply(workspace.pred / f"{name}.ply", cloud, values)
    return {"frames": len(clouds), "clusters": len(centroids)}


def run_eval(workspace, config):
    """Отчёт mIoU по pred/*.label против labels/*.label."""
    workspace.require("segment", workspace.pred)
    workspace.require("synth", workspace.labels)
    pairs = []
    for name in workspace.frame_names():
        pred_path = workspace.require("segment", workspace.pred / f"{name}.label")
        truth_path = workspace.labels / f"{name}.label"
        pairs.append((read_kitti_label(pred_path).semantic, read_kitti_label(truth_path).semantic))
    if not pairs:
        raise MissingStageError("synth", workspace.clouds)
    saved = {}
    if workspace.checkpoint.exists():
        _, _, saved = load_checkpoint(workspace.checkpoint)
    learn = saved.get("learn", config["learn"])
    clusters = max(learn["k"], max(int(pred.max()) + 1 for pred, _ in pairs if len(pred)))
    classes, names = truth_classes(config, [truth for _, truth in pairs])
    report = evaluate(pairs, clusters, classes, ignore=set(config["dataset"]["ignore"]), class_names=names)
    report.update(stage="eval", mode=learn["mode"])
    write_report(workspace.report, report)
    return report


def write_report(path, report):
    serializer = MetricsReportSerializer(data=report)
    serializer.is_valid(raise_exception=True)
    with open(path, "w") as stream:
        json.dump(report, stream, ensure_ascii=False, indent=2, sort_keys=True)


def score_fields(workspace, aligned, config):
    """Поля оценок подвижности из сайдкаров scores/ для отфильтрованных точек каждого кадра."""
    fields = []
    for t, name in enumerate(workspace.frame_names()):
        cloud = aligned.originals[t]
        full = read_scores(workspace.require("autolabel", workspace.scores / f"{name}.f32"))
        if len(full) != len(cloud) + cloud.dropped:
            raise LabelMismatchError(f"{name}: оценок {len(full)}, точек в файле {len(cloud) + cloud.dropped}")
        ids = aligned.clouds[t].point_ids
        fields.append(DynamicScoreField(full[ids], ids, t, config["dynamics"]["window"], config["dynamics"]["lam"]))
    return fields


def run_cascade_stage(workspace, config, progress=False):
    """Каскад фон/передний план -> два кластера; отчёт cascade.json при наличии разметки."""
    cfg = cascade_config(config)
    preset = sensor_preset(config)
    clouds = load_clouds(workspace)
    model = labels = None
    if cfg.variant != "single-shot":
        aligned = load_aligned(workspace, config, clouds)
        labels = pseudo_labels(aligned, score_fields(workspace, aligned, config), cfg)
        model = train_fgbg(aligned.originals, labels, preset, cfg, dump_dir=workspace.ckpt, progress=progress)
    sequence = load_training_sequence(workspace, config, cfg.learn.mode, clouds)
    result = run_cascade(model, [sequence], cfg, progress)

    directory = workspace.root / "pred_cascade"
    os.makedirs(directory, exist_ok=True)
    for name, cloud, values in zip(workspace.frame_names(), clouds, result.labels[0]):
        write_kitti_label(directory / f"{name}.label", to_file_order(cloud, values))

    report = {"variant": cfg.variant}
    if workspace.labels.is_dir():
        truth = [group_truth(classes, config["dataset"]["labels"]) for classes in load_truth(workspace, clouds)]
        report["cascade"] = cascade_report(list(zip(result.labels[0], truth)), cfg.variant)
        if result.foreground is not None:
            report["fgbg"] = fgbg_report(list(zip(result.foreground[0], truth)))
            report["pseudo_labels"] = fgbg_report([
                (label.labels[cloud.point_ids] == FgBgLabel.FOREGROUND, groups)
                for label, cloud, groups in zip(labels, clouds, truth)
            ])
    if model is not None:
        report["fgbg_log"] = model.log
    with open(workspace.cascade_report, "w") as stream:
        json.dump(report, stream, ensure_ascii=False, indent=2, sort_keys=True)
    return report


def prepare_scene_workspace(workspace, config, progress=False):
    """synth -> align -> autolabel для одного каталога."""
    run_synth(workspace, config)
    run_align(workspace, config)
    run_autolabel(workspace, config, progress)


def run_benchmark(workspace, config, modes, scenes=0, progress=False):
    """train -> segment -> eval для каждого режима с одинаковыми сидом и бюджетом.

    scenes > 0: сначала синтезируются случайные сцены в bench/scene_XX, обучение идёт на всех сразу.
    """
    if scenes:
        workspaces = []
        for index in range(scenes):
            scene_config = dict(config, seed=config["seed"] + index)
            scene_config["synth"] = dict(config["synth"], scene="random")
            scene_workspace = Workspace(workspace.root / "bench" / f"scene_{index:02d}")
            prepare_scene_workspace(scene_workspace, scene_config, progress)
            workspaces.append(scene_workspace)
    else:
        workspaces = [workspace]

    clouds = [load_clouds(item) for item in workspaces]
    truth = [load_truth(item, frames) for item, frames in zip(workspaces, clouds)]
    classes, names = truth_classes(config, [values for frames in truth for values in frames])
    results = {}
    for mode in modes:
        mode_config = dict(config, learn=dict(config["learn"], mode=mode))
        sequences = [
            load_training_sequence(item, mode_config, mode, frames) for item, frames in zip(workspaces, clouds)
        ]
        result = train_model(sequences, mode_config, progress=progress)
        pairs = []
        for sequence, frames_truth in zip(sequences, truth):
            predicted = segment_frames(result.net, result.centroids, sequence.frames, sequence.preset, config)
            pairs.extend(zip(predicted, frames_truth))
        report = evaluate(pairs, config["learn"]["k"], classes, ignore=set(config["dataset"]["ignore"]),
                          class_names=names)
        results[mode] = report
        logger.info("Бенчмарк: режим %s, mIoU %.4f", mode, report["miou"])

    summary = {
        "seed": config["seed"],
        "scenes": len(workspaces),
        "learn": config["learn"],
        "modes": {mode: {"miou": report["miou"], "per_class_iou": report["per_class_iou"]}
                  for mode, report in results.items()},
    }
    with open(workspace.benchmark_report, "w") as stream:
        json.dump(summary, stream, ensure_ascii=False, indent=2, sort_keys=True)
    return summary


# --- справка по конфигурации ---

def describe_fields(serializer, prefix=""):
    """(ключ, значение по умолчанию, описание) для всех параметров, рекурсивно по разделам."""
    rows = []
    for name, field in serializer.fields.items():
        key = f"{prefix}{name}"
        if hasattr(field, "fields"):
            rows.extend(describe_fields(field, f"{key}."))
            continue
        default = field.default() if callable(field.default) else field.default
        rows.append((key, default, field.help_text or ""))
    return rows


def config_reference():
    """Markdown-таблица всех параметров с умолчаниями."""
    lines = [
        "# Параметры конфигурации пайплайна",
        "",
        "Значения задаются в YAML-файле (разделы верхнего уровня) или флагом `--set раздел.ключ=значение`.",
        "",
        "| Ключ | По умолчанию | Описание |",
        "| --- | --- | --- |",
    ]
    for key, default, help_text in describe_fields(PipelineConfigSerializer()):
        lines.append(f"| `{key}` | `{json.dumps(default, ensure_ascii=False)}` | {help_text} |")
    return "\n".join(lines) + "\n"


def error_record(stage, error):
    record = {
        "stage": stage,
        "error": type(error).__name__,
        "code": getattr(error, "code", "pipeline_error"),
        "message": str(error),
    }
    if isinstance(error, MissingStageError):
        record["missing_stage"] = error.stage
        record["path"] = str(error.path)
    return record
