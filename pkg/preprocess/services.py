import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.spatial import cKDTree

from cloud.exceptions import EmptyInputError, MalformedFileError
from cloud.models import KdIndex, PointCloud, RigidTransform
from preprocess.models import AlignConfig, AlignedSequence, GroundConfig, GroundPlane, IcpConfig, IcpResult

logger = logging.getLogger(__name__)

MIN_ICP_POINTS = 10
SOR_TOLERANCE = 1e-9
GATE_PERCENTILE = 1.0


def _xyz(points):
    return points.xyz if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64).reshape(-1, 3)


def fit_ground_plane(cloud, cfg=GroundConfig()):
    """RANSAC по нижним точкам облака с уточнением плоскости по МНК."""
    xyz = _xyz(cloud)
    if len(xyz) < 3:
        logger.warning("Меньше трёх точек, земля не определена")
        return None
    gate = np.percentile(xyz[:, 2], GATE_PERCENTILE) + cfg.height_gate
    candidates = xyz[xyz[:, 2] <= gate]
    if len(candidates) < 3:
        logger.warning("Под порогом высоты меньше трёх точек, земля не определена")
        return None

    rng = np.random.default_rng(cfg.seed)
    cos_limit = math.cos(math.radians(cfg.max_normal_angle_deg))
    scale = max(1.0, float(np.ptp(candidates, axis=0).max()) ** 2)
    best = None
    best_count = 0
    for _ in range(cfg.iterations):
        a, b, c = candidates[rng.choice(len(candidates), 3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm <= 1e-12 * scale:
            continue
        normal = normal / norm
        if normal[2] < 0:
            normal = -normal
        if normal[2] < cos_limit:
            continue
        offset = -float(normal @ a)
        count = int((np.abs(candidates @ normal + offset) <= cfg.ground_dist_thresh).sum())
        if count > best_count:
            best, best_count = (normal, offset), count

    if best is None:
        logger.warning("Вырожденная опора (коллинеарные точки), земля не определена")
        return None

    normal, offset = best
    inliers = candidates[np.abs(candidates @ normal + offset) <= cfg.ground_dist_thresh]
    centroid = inliers.mean(axis=0)
    _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    refined = vt[-1] if vt[-1][2] >= 0 else -vt[-1]
    if refined[2] >= cos_limit:
        normal, offset = refined, -float(refined @ centroid)
    return GroundPlane(normal, offset, support=best_count)


def segment_ground(cloud, cfg=GroundConfig()):
    """Маска земли (True: земля) поверх исходной нумерации точек."""
    xyz = _xyz(cloud)
    plane = fit_ground_plane(xyz, cfg)
    if plane is None:
        return np.zeros(len(xyz), dtype=bool)
    return plane.distance(xyz) <= cfg.ground_dist_thresh


def sor_filter(cloud, k=8, stddev_mult=1.0):
    """Statistical Outlier Removal: True: точка остаётся."""
    xyz = _xyz(cloud)
    if len(xyz) <= k:
        logger.warning("SOR: точек (%d) не больше k=%d, фильтр пропущен", len(xyz), k)
        return np.ones(len(xyz), dtype=bool)
    dist, _ = cKDTree(xyz).query(xyz, k=k + 1)
    mean_dist = dist[:, 1:].mean(axis=1)
    threshold = mean_dist.mean() + stddev_mult * mean_dist.std()
    return mean_dist <= threshold + SOR_TOLERANCE


def best_fit_transform(source, target):
    """Замкнутое решение (SVD) для жёсткого совмещения пар точек."""
    source_center = source.mean(axis=0)
    target_center = target.mean(axis=0)
    h = (source - source_center).T @ (target - target_center)
    u, _, vt = np.linalg.svd(h)
    rotation = vt.T @ u.T
    if np.linalg.det(rotation) < 0:
        vt[-1, :] *= -1
        rotation = vt.T @ u.T
    return RigidTransform(rotation, target_center - rotation @ source_center)


def icp_align(source, target, init=None, cfg=IcpConfig()):
    """Point-to-point ICP с отбраковкой пар дальше max_corr_dist.

    Возвращает преобразование source -> target, средний остаток и флаг сходимости.
    """
    src = _xyz(source)
    dst = _xyz(target)
    if len(src) < MIN_ICP_POINTS or len(dst) < MIN_ICP_POINTS:
        raise EmptyInputError(f"ICP требует не меньше {MIN_ICP_POINTS} точек в обоих облаках")
    index = KdIndex(dst)
    current = init if init is not None else RigidTransform.identity()
    best, best_residual = current, math.inf
    history = []
    converged = False
    for _ in range(cfg.max_iter):
        moved = current.apply(src)
        dist, idx = index.query(moved, distance_upper_bound=cfg.max_corr_dist)
        matched = idx >= 0
        if matched.sum() < 3:
            break
        residual = float(dist[matched].mean())
        if history and residual > history[-1]:
            converged = True
            break
        history.append(residual)
        best, best_residual = current, residual
        if len(history) > 1 and history[-2] - residual < cfg.tol:
            converged = True
            break
        step = best_fit_transform(moved[matched], dst[idx[matched]])
        current = step.compose(current)
    return IcpResult(best, best_residual, converged, len(history), tuple(history))


def filter_frame(cloud, cfg):
    """Удаление земли, затем SOR по оставшимся точкам. Маски в исходной нумерации."""
    plane = fit_ground_plane(cloud, cfg.ground)
    if plane is None:
        ground = np.zeros(len(cloud), dtype=bool)
    else:
        ground = plane.distance(cloud.xyz) <= cfg.ground.ground_dist_thresh
    rest = np.flatnonzero(~ground)
    keep = np.zeros(len(cloud), dtype=bool)
    keep[rest[sor_filter(cloud.xyz[rest], cfg.sor.k, cfg.sor.stddev_mult)]] = True
    return ground, keep, plane


def _filter_sequence(clouds, cfg, threads):
    """filter_frame по всем кадрам; кадры независимы и фильтруются в пуле потоков."""
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        results = list(pool.map(lambda cloud: filter_frame(cloud, cfg), clouds))
    valid = []
    for cloud, (_, keep, _) in zip(clouds, results):
        valid.append(int(keep.sum()) >= cfg.min_points)
        if not valid[-1]:
            logger.warning("Кадр %d: после фильтрации осталось %d точек, кадр исключён",
                           cloud.frame_index, int(keep.sum()))
    ground_masks, keep_masks, planes = (tuple(column) for column in zip(*results))
    return ground_masks, keep_masks, planes, tuple(valid)


def align_sequence(clouds, cfg=AlignConfig(), threads=1):
    """Выравнивает все кадры к первому цепочкой ICP (t -> предыдущий корректный кадр)."""
    if len(clouds) < 2:
        raise EmptyInputError("для выравнивания нужно не меньше двух кадров")
    ground_masks, keep_masks, planes, valid = _filter_sequence(clouds, cfg, threads)
    filtered = [cloud.subset(keep) for cloud, keep in zip(clouds, keep_masks)]

    poses = [RigidTransform.identity()]
    residuals = [0.0]
    reference = 0 if valid[0] else None
    motion = RigidTransform.identity()
    for t in range(1, len(clouds)):
        if not valid[t] or reference is None:
            poses.append(poses[-1])
            residuals.append(math.nan)
            if valid[t]:
                reference = t
            continue
        result = icp_align(filtered[t], filtered[reference], init=motion, cfg=cfg.icp)
        if not result.converged:
            logger.warning("Кадр %d: ICP не сошёлся, остаток %.4f м", t, result.residual)
        poses.append(poses[reference].compose(result.transform))
        residuals.append(result.residual)
        motion = result.transform
        reference = t

    return AlignedSequence(
        originals=tuple(clouds),
        clouds=tuple(filtered),
        poses=tuple(poses),
        ground_masks=ground_masks,
        keep_masks=keep_masks,
        planes=planes,
        valid=valid,
        residuals=tuple(residuals),
    )


def aligned_from_poses(clouds, poses, cfg=AlignConfig(), threads=1):
    """Выровненная последовательность по сохранённым позам, без повторного ICP."""
    if len(poses) != len(clouds):
        raise MalformedFileError(f"поз {len(poses)}, кадров {len(clouds)}")
    ground_masks, keep_masks, planes, valid = _filter_sequence(clouds, cfg, threads)
    return AlignedSequence(
        originals=tuple(clouds),
        clouds=tuple(cloud.subset(keep) for cloud, keep in zip(clouds, keep_masks)),
        poses=tuple(poses),
        ground_masks=ground_masks,
        keep_masks=keep_masks,
        planes=planes,
        valid=valid,
    )


def write_poses(path, poses):
    """Позы в формате KITTI odometry: 12 чисел (3x4 построчно) на кадр."""
    np.savetxt(path, np.array([pose.to_kitti_row() for pose in poses]).reshape(-1, 12), fmt="%.12e")


def read_poses(path):
    try:
        rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as error:
        raise MalformedFileError(f"{path}: {error}") from error
    if rows.shape[1] != 12:
        raise MalformedFileError(f"{path}: в строке позы {rows.shape[1]} чисел вместо 12")
    return [RigidTransform.from_kitti_row(row) for row in rows]
