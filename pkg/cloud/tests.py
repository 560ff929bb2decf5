import math
import os
import tempfile
from unittest import TestCase

import numpy as np
from django.core.exceptions import ValidationError

from cloud.exceptions import ConfigurationError, EmptyInputError, LabelMismatchError, MalformedFileError
from cloud.models import KdIndex, Point, PointCloud, RigidTransform, SensorFov
from cloud.services import (
    nearest_neighbor,
    normalize_intensity,
    pair_labels,
    project_to_range_image,
    read_kitti_bin,
    read_kitti_label,
    write_kitti_bin,
    write_kitti_label,
    write_ply,
)


class KittiBinTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "000000.bin")

    def tearDown(self):
        self.tmp.cleanup()

    def test_decode_two_points(self):
        np.array([1, 2, 3, 0.5, 4, 5, 6, 0.25], dtype="<f4").tofile(self.path)
        cloud = read_kitti_bin(self.path)
        self.assertEqual(len(cloud), 2)
        np.testing.assert_array_equal(cloud.xyz, [[1, 2, 3], [4, 5, 6]])
        np.testing.assert_array_equal(cloud.intensity, [0.5, 0.25])

    def test_empty_file_gives_empty_cloud(self):
        open(self.path, "wb").close()
        self.assertEqual(len(read_kitti_bin(self.path)), 0)

    def test_size_not_multiple_of_16(self):
        with open(self.path, "wb") as stream:
            stream.write(b"\x00" * 20)
        with self.assertRaises(MalformedFileError):
            read_kitti_bin(self.path)

    def test_non_finite_points_dropped_and_counted(self):
        np.array([1, 2, 3, 0.5, np.nan, 5, 6, 0.25, 7, 8, 9, 0.1], dtype="<f4").tofile(self.path)
        cloud = read_kitti_bin(self.path)
        self.assertEqual(len(cloud), 2)
        self.assertEqual(cloud.dropped, 1)
        np.testing.assert_array_equal(cloud.point_ids, [0, 2])

    def test_round_trip_is_bit_identical(self):
        rng = np.random.default_rng(3)
        values = rng.normal(size=(1000, 4)).astype(np.float32)
        cloud = PointCloud(values[:, :3], values[:, 3])
        write_kitti_bin(self.path, cloud)
        again = read_kitti_bin(self.path)
        np.testing.assert_array_equal(again.xyz.astype(np.float32), values[:, :3])
        np.testing.assert_array_equal(again.intensity.astype(np.float32), values[:, 3])


class KittiLabelTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "000000.label")

    def tearDown(self):
        self.tmp.cleanup()

    def test_bit_split(self):
        np.array([0x00010028], dtype="<u4").tofile(self.path)
        labels = read_kitti_label(self.path)
        self.assertEqual(labels.semantic[0], 40)
        self.assertEqual(labels.instance[0], 1)

    def test_all_zero_file(self):
        np.zeros(7, dtype="<u4").tofile(self.path)
        labels = read_kitti_label(self.path)
        np.testing.assert_array_equal(labels.semantic, np.zeros(7))

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        semantic = rng.integers(0, 260, size=500)
        instance = rng.integers(0, 1000, size=500)
        write_kitti_label(self.path, semantic, instance)
        labels = read_kitti_label(self.path)
        np.testing.assert_array_equal(labels.semantic, semantic)
        np.testing.assert_array_equal(labels.instance, instance)

    def test_length_mismatch_at_pairing(self):
        np.zeros(3, dtype="<u4").tofile(self.path)
        cloud = PointCloud(np.zeros((4, 3)), np.zeros(4))
        with self.assertRaises(LabelMismatchError):
            pair_labels(cloud, read_kitti_label(self.path))

    def test_malformed_label_file(self):
        with open(self.path, "wb") as stream:
            stream.write(b"\x00" * 6)
        with self.assertRaises(MalformedFileError):
            read_kitti_label(self.path)


class ProjectionTestCase(TestCase):
    def setUp(self):
        self.fov = SensorFov.from_degrees(45.0, 45.0)

    def test_forward_ray(self):
        cloud = PointCloud([[1.0, 0.0, 0.0]], [0.3])
        rv = project_to_range_image(cloud, 64, 1024, self.fov)
        self.assertTrue(rv.valid_mask[32, 512])
        self.assertEqual(rv.point_index[32, 512], 0)
        np.testing.assert_allclose(rv.data[32, 512], [1.0, 0.0, 0.0, 0.3, 1.0])

    def test_left_ray(self):
        cloud = PointCloud([[0.0, 1.0, 0.0]], [0.0])
        rv = project_to_range_image(cloud, 64, 1024, self.fov)
        self.assertEqual(rv.point_pixels[0] % 1024, 256)

    def test_invalid_shape(self):
        with self.assertRaises(ConfigurationError):
            project_to_range_image(PointCloud.empty(), 0, 10, self.fov)

    def test_nearest_point_wins_collision(self):
        cloud = PointCloud([[2.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [0.0, 0.0, 0.0])
        rv = project_to_range_image(cloud, 64, 1024, self.fov)
        self.assertEqual(rv.point_index[32, 512], 1)
        self.assertEqual(rv.owned, 1)
        self.assertEqual(rv.occluded, 2)
        np.testing.assert_array_equal(rv.owner_pixels() >= 0, [False, True, False])

    def test_zero_range_skipped(self):
        cloud = PointCloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [0.0, 0.0])
        rv = project_to_range_image(cloud, 64, 1024, self.fov)
        self.assertEqual(rv.skipped, 1)
        self.assertEqual(rv.point_pixels[0], -1)

    def test_out_of_fov_clamped_or_dropped(self):
        fov = SensorFov.from_degrees(10.0, 10.0)
        cloud = PointCloud([[1.0, 0.0, 1.0]], [0.0])
        clamped = project_to_range_image(cloud, 16, 64, fov)
        self.assertEqual(clamped.point_pixels[0] // 64, 0)
        dropped = project_to_range_image(cloud, 16, 64, fov, drop_out_of_fov=True)
        self.assertEqual(dropped.dropped_out_of_fov, 1)
        self.assertFalse(dropped.valid_mask.any())

    def test_reprojection_and_totality_on_random_scene(self):
        rng = np.random.default_rng(7)
        xyz = rng.uniform(-30, 30, size=(10000, 3))
        xyz[:, 2] = rng.uniform(-3, 2, size=10000)
        xyz[:5] = 0.0
        cloud = PointCloud(xyz, rng.uniform(0, 1, size=10000))
        height, width = 64, 1024
        fov = SensorFov.from_degrees(10.0, 30.0)
        rv = project_to_range_image(cloud, height, width, fov)

        self.assertEqual(rv.owned + rv.occluded + rv.skipped + rv.dropped_out_of_fov, len(cloud))
        rows, cols = np.nonzero(rv.valid_mask)
        for row, col in zip(rows, cols):
            x, y, z = cloud.xyz[rv.point_index[row, col]]
            r = math.sqrt(x * x + y * y + z * z)
            u = math.floor(0.5 * (1 - math.atan2(y, x) / math.pi) * width)
            v = math.floor((1 - (math.asin(z / r) + fov.f_down) / fov.total) * height)
            self.assertEqual((min(max(v, 0), height - 1), min(max(u, 0), width - 1)), (row, col))
            self.assertAlmostEqual(rv.data[row, col, 4], r, delta=1e-6 * r)
        self.assertTrue((rv.data[~rv.valid_mask] == -1).all())


class RigidTransformTestCase(TestCase):
    def test_invalid_rotation_rejected(self):
        with self.assertRaises(ValidationError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_compose_with_inverse_is_identity(self):
        pose = RigidTransform.from_yaw(0.4, (1.0, -2.0, 0.5))
        both = pose.compose(pose.inverse())
        np.testing.assert_allclose(both.as_matrix(), np.eye(4), atol=1e-12)

    def test_kitti_row_round_trip(self):
        pose = RigidTransform.from_yaw(-1.1, (3.0, 2.0, 1.0))
        again = RigidTransform.from_kitti_row(pose.to_kitti_row())
        np.testing.assert_allclose(again.as_matrix(), pose.as_matrix(), atol=1e-12)


class KdIndexTestCase(TestCase):
    def test_query_equal_to_point(self):
        cloud = PointCloud([[0, 0, 0], [1, 1, 1], [2, 2, 2]], [0, 0, 0])
        index = KdIndex.build(cloud)
        self.assertEqual(nearest_neighbor(index, Point(1, 1, 1)), (1, 0.0))

    def test_single_point_index(self):
        index = KdIndex.build(PointCloud([[5, 5, 5]], [0]))
        self.assertEqual(nearest_neighbor(index, Point(-100, 3, 0))[0], 0)

    def test_empty_index(self):
        with self.assertRaises(EmptyInputError):
            nearest_neighbor(KdIndex.build(PointCloud.empty()), Point(0, 0, 0))

    def test_tie_goes_to_lowest_index(self):
        index = KdIndex.build(PointCloud([[1, 0, 0], [-1, 0, 0], [0, 1, 0]], [0, 0, 0]))
        self.assertEqual(nearest_neighbor(index, Point(0, 0, 0))[0], 0)

    def test_many_equidistant_neighbours(self):
        corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
        rng = np.random.default_rng(3)
        for _ in range(10):
            points = np.vstack([corners[rng.permutation(8)], rng.uniform(5, 10, size=(20, 3))])
            order = rng.permutation(len(points))
            index = KdIndex(points[order])
            dist, idx = index.query(np.zeros((1, 3)))
            self.assertEqual(idx[0], int(np.argsort(order)[:8].min()))
            self.assertAlmostEqual(dist[0], np.sqrt(3))

    def test_grid_cell_centres_match_linear_scan(self):
        grid = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        points = grid[np.random.default_rng(4).permutation(len(grid))]
        queries = grid[grid.max(axis=1) < 4] + 0.5
        _, idx = KdIndex(points).query(queries)
        brute = np.linalg.norm(queries[:, None, :] - points[None, :, :], axis=2)
        np.testing.assert_array_equal(idx, brute.argmin(axis=1))

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(11)
        points = rng.uniform(-10, 10, size=(500, 3))
        queries = rng.uniform(-12, 12, size=(100, 3))
        index = KdIndex(points)
        dist, idx = index.query(queries)
        brute = np.linalg.norm(queries[:, None, :] - points[None, :, :], axis=2)
        np.testing.assert_array_equal(idx, brute.argmin(axis=1))
        np.testing.assert_allclose(dist, brute.min(axis=1), rtol=1e-12)


class IntensityAndPlyTestCase(TestCase):
    def test_normalize_when_above_one(self):
        cloud = PointCloud(np.zeros((3, 3)), [10.0, 50.0, 100.0])
        np.testing.assert_allclose(normalize_intensity(cloud).intensity, [0.1, 0.5, 1.0])

    def test_already_normalized_untouched(self):
        cloud = PointCloud(np.zeros((2, 3)), [0.2, 0.9])
        self.assertIs(normalize_intensity(cloud), cloud)

    def test_ply_header(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "scan.ply")
            write_ply(path, PointCloud(np.ones((2, 3)), [0.5, 0.5]), labels=[1, 2])
            with open(path) as ply:
                content = ply.read()
        self.assertIn("element vertex 2", content)
        self.assertTrue(content.strip().endswith("0 200 255"))
