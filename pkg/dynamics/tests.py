import csv
import math
import os
import tempfile
from unittest import TestCase

import numpy as np
from django.core.exceptions import ValidationError
from sklearn.cluster import DBSCAN

from cloud.exceptions import EmptyInputError
from cloud.models import PointCloud, RigidTransform
from dynamics.models import NOISE, BoxInstance, DynamicScoreField, DynamicsConfig
from dynamics.services import (
    cluster_dynamic,
    dbscan,
    dynamic_scores,
    fit_box,
    filter_boxes,
    load_boxes,
    read_scores,
    save_boxes,
    write_boxes_csv,
    split_dynamic,
    write_scores,
)
from preprocess.models import AlignedSequence


def make_sequence(frames):
    clouds = [PointCloud(xyz, np.zeros(len(xyz)), frame_index=t) for t, xyz in enumerate(frames)]
    masks = [np.ones(len(cloud), dtype=bool) for cloud in clouds]
    return AlignedSequence(
        originals=tuple(clouds),
        clouds=tuple(clouds),
        poses=tuple(RigidTransform.identity() for _ in clouds),
        ground_masks=tuple(~mask for mask in masks),
        keep_masks=tuple(masks),
    )


def reference_dbscan(points, eps, min_pts):
    """Прямой перебор O(n²) с тем же порядком обхода."""
    n = len(points)
    dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    neighbors = [list(np.flatnonzero(dist[i] <= eps)) for i in range(n)]
    core = [len(hood) >= min_pts for hood in neighbors]
    labels = [NOISE] * n
    cluster = 0
    for seed in range(n):
        if labels[seed] != NOISE or not core[seed]:
            continue
        labels[seed] = cluster
        frontier = [seed]
        while frontier:
            current = frontier.pop(0)
            for neighbor in neighbors[current]:
                if labels[neighbor] == NOISE:
                    labels[neighbor] = cluster
                    if core[neighbor]:
                        frontier.append(neighbor)
        cluster += 1
    return np.array(labels)


class DynamicScoreTestCase(TestCase):
    def test_static_point_scores_zero(self):
        point = np.array([[3.0, 1.0, 0.5]])
        field = dynamic_scores(make_sequence([point, point, point]), 1, window=3, lam=1.0)
        self.assertEqual(field.scores[0], 0.0)

    def test_closed_form_value(self):
        frames = [np.array([[2.0, 0, 0]]), np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])]
        field = dynamic_scores(make_sequence(frames), 1, window=3, lam=0.5)
        self.assertAlmostEqual(field.scores[0], 1 - math.exp(-1), places=12)

    def test_boundary_frames_shrink_window(self):
        frames = [np.zeros((1, 3)), np.ones((1, 3))]
        field = dynamic_scores(make_sequence(frames), 0, window=3)
        self.assertAlmostEqual(field.scores[0], 1 - math.exp(-math.sqrt(3)), places=12)

    def test_no_reference_frames(self):
        sequence = make_sequence([np.zeros((1, 3)), np.zeros((1, 3))])
        with self.assertRaises(EmptyInputError):
            dynamic_scores(sequence, 0, window=0)

    def test_score_stays_below_one(self):
        frames = [np.array([[1e6, 0, 0]]), np.zeros((1, 3))]
        field = dynamic_scores(make_sequence(frames), 1, lam=10.0)
        self.assertLess(field.scores[0], 1.0)

    def test_score_field_rejects_out_of_range(self):
        with self.assertRaises(ValidationError):
            DynamicScoreField(np.array([1.0]), np.array([0]), frame=0, window=3, lam=1.0)

    def test_full_field_and_sidecar(self):
        field = DynamicScoreField(np.array([0.25, 0.75]), np.array([1, 3]), frame=0, window=3, lam=1.0)
        np.testing.assert_array_equal(field.to_full(5), [0, 0.25, 0, 0.75, 0])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "000000.score")
            write_scores(path, field, 5)
            self.assertEqual(os.path.getsize(path), 20)
            np.testing.assert_array_equal(read_scores(path), [0, 0.25, 0, 0.75, 0])


class SplitDynamicTestCase(TestCase):
    def field(self, scores):
        return DynamicScoreField(np.array(scores), np.arange(len(scores)), frame=0, window=3, lam=1.0)

    def test_zero_threshold_marks_everything(self):
        self.assertTrue(split_dynamic(self.field([0.0, 0.3, 0.99]), 0.0).all())

    def test_threshold(self):
        np.testing.assert_array_equal(split_dynamic(self.field([0.1, 0.9]), 0.5), [False, True])

    def test_threshold_is_inclusive(self):
        self.assertTrue(split_dynamic(self.field([0.5]), 0.5)[0])

    def test_threshold_out_of_range(self):
        with self.assertRaises(ValidationError):
            split_dynamic(self.field([0.1]), 1.0)


class DbscanTestCase(TestCase):
    def test_two_separated_blobs(self):
        rng = np.random.default_rng(0)
        blobs = np.vstack([rng.uniform(0, 0.2, (10, 3)), rng.uniform(0, 0.2, (10, 3)) + 10.0])
        labels = dbscan(blobs, eps=1.0, min_pts=3)
        self.assertEqual(set(labels), {0, 1})
        self.assertEqual(len(set(labels[:10])), 1)

    def test_isolated_point_is_noise(self):
        self.assertEqual(dbscan(np.zeros((1, 3)), eps=1.0, min_pts=2)[0], NOISE)

    def test_matches_reference(self):
        rng = np.random.default_rng(5)
        for case in range(50):
            points = rng.uniform(0, 10, (200, 3))
            eps, min_pts = rng.uniform(0.9, 1.6), int(rng.integers(3, 7))
            with self.subTest(case=case):
                ours = dbscan(points, eps, min_pts)
                expected = reference_dbscan(points, eps, min_pts)
                np.testing.assert_array_equal(ours == NOISE, expected == NOISE)
                # одно и то же разбиение с точностью до перенумерации
                pairs = set(zip(ours, expected))
                self.assertEqual(len(pairs), len(set(ours)))
                self.assertEqual(len(pairs), len(set(expected)))

    def test_core_partition_matches_sklearn(self):
        rng = np.random.default_rng(6)
        points = np.vstack([rng.normal(0, 0.5, (80, 3)), rng.normal(5, 0.5, (80, 3)), rng.uniform(-5, 10, (40, 3))])
        ours = dbscan(points, 0.7, 5)
        theirs = DBSCAN(eps=0.7, min_samples=5).fit(points)
        core = theirs.core_sample_indices_
        pairs = set(zip(ours[core], theirs.labels_[core]))
        self.assertEqual(len(pairs), len(set(ours[core])))
        self.assertEqual(len(pairs), len(set(theirs.labels_[core])))

    def test_permutation_keeps_core_partition(self):
        rng = np.random.default_rng(7)
        points = np.vstack([rng.normal(0, 0.3, (50, 3)), rng.normal(4, 0.3, (50, 3))])
        order = rng.permutation(len(points))
        labels = dbscan(points, 0.5, 4)
        shuffled = np.empty_like(labels)
        shuffled[order] = dbscan(points[order], 0.5, 4)
        self.assertEqual(len(set(zip(labels, shuffled))), len(set(labels)))


class ClusterDynamicTestCase(TestCase):
    def test_empty_mask(self):
        cloud = PointCloud(np.zeros((5, 3)), np.zeros(5))
        field = DynamicScoreField(np.zeros(5), np.arange(5), frame=0, window=3, lam=1.0)
        self.assertEqual(cluster_dynamic(cloud, field, np.zeros(5, dtype=bool)), [])

    def test_two_movers(self):
        rng = np.random.default_rng(8)
        xyz = np.vstack([
            rng.uniform(0, 1, (40, 3)), rng.uniform(0, 1, (40, 3)) + [10, 0, 0], rng.uniform(-20, 20, (30, 3)),
        ])
        scores = np.concatenate([np.full(80, 0.9), np.full(30, 0.1)])
        cloud = PointCloud(xyz, np.zeros(len(xyz)))
        field = DynamicScoreField(scores, np.arange(len(xyz)), frame=0, window=3, lam=1.0)
        clusters = cluster_dynamic(cloud, field, split_dynamic(field, 0.5), DynamicsConfig())
        self.assertEqual(len(clusters), 2)
        self.assertEqual(sorted(len(cluster) for cluster in clusters), [40, 40])


class FitBoxTestCase(TestCase):
    def setUp(self):
        grid = np.stack(np.meshgrid(np.linspace(0, 2, 21), np.linspace(0, 1, 11), np.linspace(0, 1, 5)), axis=-1)
        self.points = grid.reshape(-1, 3)

    def test_axis_aligned(self):
        box = fit_box(self.points)
        self.assertAlmostEqual(box.length, 2.0)
        self.assertAlmostEqual(box.width, 1.0)
        self.assertAlmostEqual(box.height, 1.0)
        self.assertAlmostEqual(box.volume, 2.0)
        self.assertAlmostEqual(box.heading, 0.0)
        np.testing.assert_allclose(box.center, [1.0, 0.5, 0.5])

    def test_rotation_equivariance(self):
        rotated = RigidTransform.from_yaw(math.radians(30)).apply(self.points)
        box = fit_box(rotated)
        self.assertAlmostEqual(box.length, 2.0)
        self.assertAlmostEqual(box.width, 1.0)
        self.assertAlmostEqual(box.volume, 2.0)
        wrapped = (box.heading - math.radians(30) + math.pi / 2) % math.pi - math.pi / 2
        self.assertLess(abs(wrapped), 1e-6)
        self.assertTrue(box.contains(rotated).all())

    def test_translation_equivariance(self):
        shift = np.array([5.0, -3.0, 2.0])
        box = fit_box(self.points)
        moved = fit_box(self.points + shift)
        np.testing.assert_allclose(moved.center, box.center + shift, atol=1e-9)
        np.testing.assert_allclose(moved.extents, box.extents, atol=1e-9)

    def test_isotropic_cluster_has_zero_heading(self):
        square = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 1]], dtype=float)
        self.assertEqual(fit_box(square).heading, 0.0)

    def test_too_few_points(self):
        with self.assertRaises(EmptyInputError):
            fit_box(self.points[:2])


class FilterBoxesTestCase(TestCase):
    def box(self, size, length=4.0, width=2.0, height=1.5):
        return BoxInstance(np.zeros(3), 0.0, length, width, height, np.arange(size))

    def test_filters(self):
        few = self.box(3)
        long = self.box(50, length=25.0)
        tiny = self.box(50, length=0.2, width=0.2, height=0.2)
        good = self.box(50)
        cfg = DynamicsConfig(n_min=5)
        kept = filter_boxes([few, long, tiny, good], cfg)
        self.assertEqual(kept, [good])
        self.assertEqual(filter_boxes(kept, cfg), kept)

    def test_box_archive_round_trip(self):
        boxes = [BoxInstance([1, 2, 3], 0.4, 4.0, 2.0, 1.5, [5, 6, 7], frame=2), self.box(4)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "boxes.npz")
            save_boxes(path, boxes)
            again = load_boxes(path)
        self.assertEqual(len(again), 2)
        np.testing.assert_array_equal(again[0].point_ids, [5, 6, 7])
        self.assertEqual(again[0].frame, 2)
        self.assertAlmostEqual(again[0].heading, 0.4)

    def test_boxes_csv(self):
        boxes = [
            BoxInstance([1, 2, 3], 0.4, 4.0, 2.0, 1.5, [5, 6, 7], frame=3),
            BoxInstance([0, 0, 0], 0.0, 1.0, 1.0, 1.0, [1], frame=1),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "boxes.csv")
            write_boxes_csv(path, boxes)
            with open(path, newline="") as stream:
                rows = list(csv.DictReader(stream))
        self.assertEqual([row["frame"] for row in rows], ["1", "3"])
        self.assertEqual(rows[1]["points"], "3")
        self.assertAlmostEqual(float(rows[1]["length"]), 4.0)
