import csv
import logging

import numpy as np
from scipy.optimize import linear_sum_assignment

from cloud.exceptions import MalformedFileError
from dynamics.models import BoxInstance
from tracking.models import CostMatrix, Track, TrackingConfig, TrackRegistry

logger = logging.getLogger(__name__)

TRACK_COLUMNS = ("frame", "track_id", "cx", "cy", "cz", "heading", "length", "width", "height")


def overlap_volume(first, second):
    """Объём пересечения осевых оболочек двух боксов."""
    low_a, high_a = first.aabb()
    low_b, high_b = second.aabb()
    sides = np.minimum(high_a, high_b) - np.maximum(low_a, low_b)
    return float(np.prod(np.clip(sides, 0.0, None)))


def hull_volume(box):
    low, high = box.aabb()
    return float(np.prod(high - low))


def pair_cost(current, previous, cfg=TrackingConfig()):
    distance = float(np.linalg.norm(current.center - previous.center))
    if distance > cfg.gate_dist:
        return np.inf
    w_center, w_overlap, w_volume = cfg.weights
    # доля перекрытия считается по осевым оболочкам, у повёрнутого бокса оболочка больше его объёма
    smaller = min(hull_volume(current), hull_volume(previous))
    overlap = overlap_volume(current, previous) / smaller if smaller > 0 else float(distance == 0)
    larger = max(current.volume, previous.volume)
    volume_change = abs(current.volume - previous.volume) / larger if larger > 0 else 0.0
    return w_center * distance / cfg.d_norm + w_overlap * (1.0 - min(overlap, 1.0)) + w_volume * volume_change


def build_cost_matrix(current, previous, cfg=TrackingConfig()):
    values = np.zeros((len(current), len(previous)))
    for i, box in enumerate(current):
        for j, other in enumerate(previous):
            values[i, j] = pair_cost(box, other, cfg)
    return CostMatrix(values)


def solve_assignment(costs):
    """Частичное паросочетание: максимум пар среди конечных стоимостей, затем минимум суммы."""
    values = costs.values if isinstance(costs, CostMatrix) else CostMatrix(costs).values
    finite = np.isfinite(values)
    if not finite.any():
        return []
    # штраф больше любой суммы конечных стоимостей: лишняя отсечённая пара всегда хуже
    penalty = values[finite].sum() + 1.0
    rows, cols = linear_sum_assignment(np.where(finite, values, penalty * (min(values.shape) + 1)))
    return [(int(r), int(c)) for r, c in zip(rows, cols) if finite[r, c]]


def step_tracks(registry, detections, frame, cfg=TrackingConfig()):
    """Продлевает треки боксами кадра frame, открывает новые и завершает потерянные."""
    previous = [track.last_box for track in registry.active]
    matches = solve_assignment(build_cost_matrix(detections, previous, cfg))
    matched_rows = {row for row, _ in matches}
    matched_tracks = set()
    for row, col in matches:
        registry.active[col].add(detections[row])
        matched_tracks.add(col)

    still_active = []
    for col, track in enumerate(registry.active):
        if col not in matched_tracks:
            track.misses += 1
            if track.misses > cfg.max_misses:
                registry.retired.append(track)
                logger.debug("Трек %d завершён на кадре %d", track.id, frame)
                continue
        still_active.append(track)
    registry.active = still_active

    for row, box in enumerate(detections):
        if row not in matched_rows:
            registry.open(box)
    return registry


def track_sequence(boxes_by_frame, cfg=TrackingConfig()):
    """Трекинг по всей последовательности; boxes_by_frame: список боксов на кадр."""
    registry = TrackRegistry()
    for frame, detections in enumerate(boxes_by_frame):
        step_tracks(registry, list(detections), frame, cfg)
    tracks = registry.all_tracks()
    logger.info("Треков: %d (боксов: %d)", len(tracks), sum(len(track) for track in tracks))
    return tracks


def write_tracks_csv(path, tracks):
    rows = sorted(
        (frame, track.id, *box.center, box.heading, box.length, box.width, box.height)
        for track in tracks for frame, box in track.boxes.items()
    )
    with open(path, "w", newline="") as stream:
        writer = csv.writer(stream)
        writer.writerow(TRACK_COLUMNS)
        writer.writerows(rows)


def save_tracks(path, tracks):
    """Треки вместе с номерами точек боксов, для стадии соответствий."""
    boxes = [(track.id, box) for track in tracks for box in track.boxes.values()]
    ids = [box.point_ids for _, box in boxes]
    np.savez(
        path,
        params=np.array([[track_id, box.frame, *box.center, box.heading, box.length, box.width, box.height]
                         for track_id, box in boxes]).reshape(-1, 9),
        offsets=np.cumsum([0] + [len(chunk) for chunk in ids]),
        point_ids=np.concatenate(ids) if ids else np.empty(0, dtype=np.int64),
    )


def load_tracks(path):
    try:
        with np.load(path) as archive:
            params, offsets, ids = archive["params"], archive["offsets"], archive["point_ids"]
    except (OSError, KeyError, ValueError) as error:
        raise MalformedFileError(f"{path}: {error}") from error
    tracks = {}
    for k, row in enumerate(params):
        track_id = int(row[0])
        box = BoxInstance(row[2:5], float(row[5]), float(row[6]), float(row[7]), float(row[8]),
                          ids[offsets[k]:offsets[k + 1]], int(row[1]))
        tracks.setdefault(track_id, Track(track_id))
        tracks[track_id].boxes[box.frame] = box
    for track in tracks.values():
        track.last_seen = max(track.boxes)
    return [tracks[key] for key in sorted(tracks)]
