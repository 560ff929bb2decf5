import os
import tempfile
from collections import Counter
from unittest import TestCase

import numpy as np
from scipy.stats import chisquare

from cloud.exceptions import ConfigurationError, MalformedFileError
from cloud.models import PointCloud, RigidTransform, SensorFov
from cloud.services import project_to_range_image
from correspond.models import CorrespondenceSet, PairKind
from correspond.services import (
    build_correspondences,
    candidate_pairs,
    dynamic_correspondences,
    read_correspondences,
    sample_pair,
    static_correspondences,
    to_pixel_pairs,
    write_correspondences,
)
from dynamics.services import fit_box
from preprocess.models import AlignedSequence
from tracking.models import Track


def make_sequence(frames, ground=None):
    clouds = [PointCloud(xyz, np.zeros(len(xyz)), frame_index=t) for t, xyz in enumerate(frames)]
    ground = [np.zeros(len(c), dtype=bool) for c in clouds] if ground is None else ground
    return AlignedSequence(
        originals=tuple(clouds),
        clouds=tuple(cloud.subset(~mask) for cloud, mask in zip(clouds, ground)),
        poses=tuple(RigidTransform.identity() for _ in clouds),
        ground_masks=tuple(ground),
        keep_masks=tuple(~mask for mask in ground),
    )


def scene_with_mover(shift):
    rng = np.random.default_rng(0)
    static = np.column_stack([rng.uniform(-20, 20, 500), rng.uniform(-20, 20, 500), np.zeros(500)])
    car = rng.uniform([5, 5, 0.3], [9, 7, 1.8], size=(60, 3))
    return static, car, [np.vstack([static, car]), np.vstack([static, car + shift])]


class StaticCorrespondenceTestCase(TestCase):
    def test_identical_frames(self):
        xyz = np.random.default_rng(1).uniform(-10, 10, (300, 3))
        ids_a, ids_b = static_correspondences(make_sequence([xyz, xyz]), 0, 1)
        np.testing.assert_array_equal(ids_a, np.arange(300))
        np.testing.assert_array_equal(ids_b, np.arange(300))

    def test_no_overlap(self):
        xyz = np.random.default_rng(2).uniform(-10, 10, (100, 3))
        ids_a, _ = static_correspondences(make_sequence([xyz, xyz + 100.0]), 0, 1)
        self.assertEqual(len(ids_a), 0)

    def test_excluded_points_skipped(self):
        xyz = np.random.default_rng(3).uniform(-10, 10, (50, 3))
        ids_a, _ = static_correspondences(make_sequence([xyz, xyz]), 0, 1, exclude_a=np.arange(10))
        self.assertEqual(ids_a.min(), 10)


class DynamicCorrespondenceTestCase(TestCase):
    def setUp(self):
        self.static, self.car, frames = scene_with_mover(np.array([1.5, 0.0, 0.0]))
        self.sequence = make_sequence(frames)
        car_ids = np.arange(500, 560)
        self.track = Track(7)
        self.track.add(fit_box(frames[0][car_ids], car_ids, frame=0))
        self.track.add(fit_box(frames[1][car_ids], car_ids, frame=1))

    def test_rigid_translation_gives_identity_map(self):
        ids_a, ids_b = dynamic_correspondences([self.track], self.sequence, 0, 1)
        np.testing.assert_array_equal(ids_a, np.arange(500, 560))
        np.testing.assert_array_equal(ids_b, ids_a)

    def test_track_only_in_one_frame(self):
        lonely = Track(3)
        lonely.add(self.track.box_at(0))
        ids_a, _ = dynamic_correspondences([lonely], self.sequence, 0, 1)
        self.assertEqual(len(ids_a), 0)

    def test_combined_set_keeps_kinds_apart(self):
        corr = build_correspondences(self.sequence, [self.track], 0, 1)
        dynamic = corr.ids_a[corr.of_kind(PairKind.DYNAMIC)]
        static = corr.ids_a[corr.of_kind(PairKind.STATIC)]
        self.assertEqual(len(np.intersect1d(dynamic, static)), 0)
        self.assertEqual(len(dynamic), 60)
        self.assertEqual(len(static), 500)
        self.assertAlmostEqual(corr.coverage, 1.0)
        self.assertFalse(corr.low_quality)

    def test_same_frame_rejected(self):
        with self.assertRaises(ConfigurationError):
            build_correspondences(self.sequence, [self.track], 1, 1)

    def test_low_coverage_flagged(self):
        far = make_sequence([self.static, self.static + 100.0])
        with self.assertLogs("correspond.services", level="WARNING"):
            corr = build_correspondences(far, [], 0, 1)
        self.assertTrue(corr.low_quality)
        self.assertEqual(len(corr), 0)


class SamplePairTestCase(TestCase):
    def test_interval_from_set(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            t, s = sample_pair(40, rng)
            self.assertIn(t - s, {5, 10, 15, 20, 25, 30})
            self.assertGreaterEqual(s, 0)

    def test_single_option(self):
        rng = np.random.default_rng(1)
        self.assertEqual({sample_pair(6, rng, (5,)) for _ in range(20)}, {(5, 0)})

    def test_uniform_interval_distribution(self):
        rng = np.random.default_rng(2)
        counts = Counter(t - s for t, s in (sample_pair(100, rng) for _ in range(10000)))
        self.assertGreater(chisquare([counts[k] for k in (5, 10, 15, 20, 25, 30)]).pvalue, 0.01)

    def test_reproducible(self):
        first = [sample_pair(50, np.random.default_rng(9)) for _ in range(3)]
        second = [sample_pair(50, np.random.default_rng(9)) for _ in range(3)]
        self.assertEqual(first, second)

    def test_too_short_sequence(self):
        with self.assertRaises(ConfigurationError):
            sample_pair(5, np.random.default_rng(0), (5, 10))

    def test_candidate_pairs(self):
        self.assertEqual(candidate_pairs(4, (2,)), [(2, 0), (3, 1)])
        self.assertEqual(candidate_pairs(4, (2,), valid=[True, False, True, True]), [(2, 0)])


class PixelPairsTestCase(TestCase):
    def test_occluded_points_dropped(self):
        fov = SensorFov.from_degrees(10, 10)
        cloud = PointCloud([[2.0, 0, 0], [1.0, 0, 0], [0, 3.0, 0]], np.zeros(3))
        rv = project_to_range_image(cloud, 8, 64, fov)
        corr = CorrespondenceSet(0, 1, [0, 1, 2], [0, 1, 2], [0, 0, 1])
        pix_a, pix_b, kinds = to_pixel_pairs(corr, cloud, rv, cloud, rv)
        self.assertEqual(len(pix_a), 2)
        np.testing.assert_array_equal(kinds, [0, 1])


class CacheTestCase(TestCase):
    def test_round_trip(self):
        corr = CorrespondenceSet(3, 0, [4, 5, 9], [1, 2, 3], [0, 1, 0], coverage=0.75)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "000003_000000.corr")
            write_correspondences(path, corr)
            self.assertEqual(os.path.getsize(path), 27 + 3 * 9)
            again = read_correspondences(path)
        self.assertEqual((again.frame_a, again.frame_b), (3, 0))
        np.testing.assert_array_equal(again.ids_a, [4, 5, 9])
        np.testing.assert_array_equal(again.kinds, [0, 1, 0])
        self.assertAlmostEqual(again.coverage, 0.75)

    def test_truncated_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "broken.corr")
            with open(path, "wb") as stream:
                stream.write(b"CORR\x01")
            with self.assertRaises(MalformedFileError):
                read_correspondences(path)
