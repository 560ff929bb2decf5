import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from unittest import TestCase, mock

import numpy as np
from scipy.spatial.transform import Rotation

from cloud.exceptions import EmptyInputError, MalformedFileError
from cloud.models import KdIndex, PointCloud, RigidTransform
from preprocess.models import AlignConfig, AlignedSequence, GroundConfig, IcpConfig
from preprocess.services import (
    align_sequence,
    aligned_from_poses,
    fit_ground_plane,
    icp_align,
    read_poses,
    segment_ground,
    sor_filter,
    write_poses,
)

GROUND_Z = -1.7


def make_world(seed=0):
    """Земля, три стены под разными углами и пара коробок."""
    rng = np.random.default_rng(seed)
    ground = np.column_stack([rng.uniform(-20, 20, 3000), rng.uniform(-20, 20, 3000), np.full(3000, GROUND_Z)])
    walls = []
    for (x0, y0), angle, length in (((12, -6), 0.3, 14), ((-10, 4), 1.9, 10), ((3, 14), -0.2, 8)):
        s = rng.uniform(0, length, 600)
        z = rng.uniform(GROUND_Z, 3.0, 600)
        walls.append(np.column_stack([x0 + s * math.cos(angle), y0 + s * math.sin(angle), z]))
    boxes = []
    for center in ((5, 3), (-4, -8)):
        boxes.append(np.column_stack([
            center[0] + rng.uniform(-1, 1, 300),
            center[1] + rng.uniform(-2, 2, 300),
            rng.uniform(GROUND_Z + 0.3, GROUND_Z + 1.8, 300),
        ]))
    structure = np.vstack(walls + boxes)
    return ground, structure


class GroundTestCase(TestCase):
    def test_plane_with_box_on_top(self):
        rng = np.random.default_rng(1)
        plane = np.column_stack([rng.uniform(-10, 10, 1000), rng.uniform(-10, 10, 1000), np.zeros(1000)])
        box = np.column_stack([rng.uniform(2, 3, 200), rng.uniform(2, 3, 200), rng.uniform(0.5, 1.5, 200)])
        mask = segment_ground(PointCloud(np.vstack([plane, box]), np.zeros(1200)))
        self.assertTrue(mask[:1000].all())
        self.assertFalse(mask[1000:].any())

    def test_fitted_plane_points_up(self):
        ground, _ = make_world()
        plane = fit_ground_plane(ground, GroundConfig())
        np.testing.assert_allclose(plane.normal, [0, 0, 1], atol=1e-9)
        self.assertAlmostEqual(plane.offset, -GROUND_Z, places=9)

    def test_all_points_on_one_plane(self):
        rng = np.random.default_rng(2)
        xyz = np.column_stack([rng.uniform(-5, 5, 300), rng.uniform(-5, 5, 300), np.full(300, 0.7)])
        self.assertTrue(segment_ground(xyz).all())

    def test_collinear_points_give_empty_mask(self):
        xyz = np.column_stack([np.linspace(0, 10, 50), np.zeros(50), np.zeros(50)])
        with self.assertLogs("preprocess.services", level="WARNING"):
            mask = segment_ground(xyz)
        self.assertFalse(mask.any())

    def test_vertical_wall_is_not_ground(self):
        rng = np.random.default_rng(3)
        wall = np.column_stack([np.full(400, 4.0), rng.uniform(-5, 5, 400), rng.uniform(0, 0.4, 400)])
        with self.assertLogs("preprocess.services", level="WARNING"):
            self.assertFalse(segment_ground(wall).any())


class SorTestCase(TestCase):
    def test_isolated_point_removed(self):
        grid = np.stack(np.meshgrid(np.arange(10), np.arange(10), np.arange(3)), axis=-1).reshape(-1, 3) * 0.2
        xyz = np.vstack([grid, [[50.0, 50.0, 50.0]]])
        keep = sor_filter(xyz, k=8, stddev_mult=1.0)
        self.assertFalse(keep[-1])
        self.assertGreater(keep[:-1].mean(), 0.8)

    def test_too_few_points_keeps_everything(self):
        with self.assertLogs("preprocess.services", level="WARNING"):
            keep = sor_filter(np.random.default_rng(0).normal(size=(5, 3)), k=8)
        self.assertTrue(keep.all())


class IcpTestCase(TestCase):
    def setUp(self):
        _, self.structure = make_world(4)

    def test_identical_clouds(self):
        result = icp_align(self.structure, self.structure)
        self.assertTrue(result.converged)
        self.assertLess(result.residual, 1e-9)
        np.testing.assert_allclose(result.transform.as_matrix(), np.eye(4), atol=1e-9)

    def test_recovers_small_motion(self):
        truth = RigidTransform.from_yaw(math.radians(3.0), (0.4, -0.3, 0.05))
        source = truth.inverse().apply(self.structure)
        result = icp_align(source, self.structure)
        self.assertTrue(result.converged)
        angle, shift = result.transform.error_to(truth)
        self.assertLess(angle, 0.2)
        self.assertLess(shift, 0.05)

    def test_recovers_random_perturbations(self):
        rng = np.random.default_rng(11)
        # компактное облако: смещения точек при повороте до 10° не больше полутора метров
        target = (self.structure[::3] - self.structure.mean(axis=0)) * 0.25
        cfg = IcpConfig(max_corr_dist=3.0, tol=1e-10, max_iter=100)
        recovered = 0
        for _ in range(100):
            axis = rng.normal(size=3)
            angle = math.radians(rng.uniform(0.0, 10.0))
            shift = rng.normal(size=3)
            shift *= rng.uniform(0.0, 0.5) / np.linalg.norm(shift)
            truth = RigidTransform(Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix(), shift)
            result = icp_align(truth.inverse().apply(target), target, cfg=cfg)
            angle_error, shift_error = result.transform.error_to(truth)
            if angle_error < 0.1 and shift_error < 0.005:
                recovered += 1
        self.assertGreaterEqual(recovered, 95)

    def test_history_never_increases(self):
        truth = RigidTransform.from_yaw(math.radians(5.0), (0.6, 0.2, 0.0))
        result = icp_align(truth.inverse().apply(self.structure), self.structure)
        self.assertTrue(all(b <= a for a, b in zip(result.history, result.history[1:])))

    def test_disjoint_clouds_do_not_converge(self):
        result = icp_align(self.structure, self.structure + 1000.0, cfg=IcpConfig(max_corr_dist=1.0))
        self.assertFalse(result.converged)
        self.assertTrue(math.isinf(result.residual))

    def test_too_few_points(self):
        with self.assertRaises(EmptyInputError):
            icp_align(self.structure[:5], self.structure)


class AlignSequenceTestCase(TestCase):
    def test_poses_recovered_for_moving_sensor(self):
        ground, structure = make_world(5)
        world = np.vstack([ground, structure])
        truths = [RigidTransform.from_yaw(math.radians(1.5 * t), (0.5 * t, 0.1 * t, 0.0)) for t in range(5)]
        clouds = [
            PointCloud(pose.inverse().apply(world), np.zeros(len(world)), frame_index=t)
            for t, pose in enumerate(truths)
        ]
        aligned = align_sequence(clouds, AlignConfig())
        self.assertEqual(len(aligned), 5)
        np.testing.assert_allclose(aligned.poses[0].as_matrix(), np.eye(4))
        for estimate, truth in zip(aligned.poses, truths):
            angle, shift = estimate.error_to(truth)
            self.assertLess(angle, 0.3)
            self.assertLess(shift, 0.1)
        for t in range(5):
            self.assertGreater(aligned.ground_masks[t][:len(ground)].mean(), 0.98)
            self.assertFalse((aligned.ground_masks[t] & aligned.keep_masks[t]).any())

    def test_single_frame_rejected(self):
        with self.assertRaises(EmptyInputError):
            align_sequence([PointCloud(np.zeros((20, 3)), np.zeros(20))])

    def test_poses_file_round_trip(self):
        poses = [RigidTransform.identity(), RigidTransform.from_yaw(0.2, (1.0, 2.0, 0.0))]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "poses.txt")
            write_poses(path, poses)
            again = read_poses(path)
        for a, b in zip(poses, again):
            np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-11)

    def test_malformed_poses_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "poses.txt")
            with open(path, "w") as stream:
                stream.write("1 0 0 0 0 1 0 0\n")
            with self.assertRaises(MalformedFileError):
                read_poses(path)

    def test_rebuild_from_stored_poses(self):
        ground, structure = make_world(6)
        world = np.vstack([ground, structure])
        truths = [RigidTransform.from_yaw(0.01 * t, (0.4 * t, 0.0, 0.0)) for t in range(3)]
        clouds = [
            PointCloud(pose.inverse().apply(world), np.zeros(len(world)), frame_index=t)
            for t, pose in enumerate(truths)
        ]
        aligned = align_sequence(clouds, AlignConfig())
        rebuilt = aligned_from_poses(clouds, aligned.poses, AlignConfig(), threads=2)
        for t in range(3):
            np.testing.assert_array_equal(rebuilt.keep_masks[t], aligned.keep_masks[t])
            np.testing.assert_allclose(rebuilt.aligned(t), aligned.aligned(t))
        with self.assertRaises(MalformedFileError):
            aligned_from_poses(clouds, aligned.poses[:2])


class AlignedSequenceIndexTestCase(TestCase):
    def test_index_built_once_under_concurrent_access(self):
        clouds = [PointCloud(np.eye(3) * (t + 1), np.zeros(3), frame_index=t) for t in range(2)]
        aligned = AlignedSequence(
            originals=tuple(clouds),
            clouds=tuple(clouds),
            poses=(RigidTransform.identity(),) * 2,
            ground_masks=tuple(np.zeros(3, dtype=bool) for _ in clouds),
            keep_masks=tuple(np.ones(3, dtype=bool) for _ in clouds),
        )
        built = []

        def slow_index(points):
            time.sleep(0.01)
            built.append(len(points))
            return KdIndex(points)

        with mock.patch("preprocess.models.KdIndex", side_effect=slow_index):
            with ThreadPoolExecutor(max_workers=8) as pool:
                indexes = list(pool.map(aligned.index, [0, 1] * 8))
        self.assertEqual(len(built), 2)
        self.assertEqual(len({id(index) for index in indexes[0::2]}), 1)
        self.assertEqual(len({id(index) for index in indexes[1::2]}), 1)
