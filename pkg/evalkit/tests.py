import itertools
from unittest import TestCase

import numpy as np
from django.core.exceptions import ValidationError

from cloud.exceptions import EmptyInputError, LabelMismatchError
from evalkit.models import ConfusionMatrix
from evalkit.serializers import MetricsReportSerializer
from evalkit.services import accumulate, evaluate, map_clusters_to_classes, miou


class AccumulateTestCase(TestCase):
    def test_perfect_prediction_fills_diagonal(self):
        truth = np.repeat([0, 1], 50)
        conf = accumulate(ConfusionMatrix.zeros(2, 2), truth, truth)
        np.testing.assert_array_equal(conf.counts, [[50, 0], [0, 50]])

    def test_empty_input(self):
        conf = ConfusionMatrix(np.array([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(accumulate(conf, [], []).counts, conf.counts)

    def test_matches_naive_tally(self):
        rng = np.random.default_rng(0)
        pred, truth = rng.integers(0, 4, 1000), rng.integers(0, 5, 1000)
        expected = np.zeros((4, 5), dtype=np.int64)
        for p, t in zip(pred, truth):
            if t != 0:
                expected[p, t] += 1
        conf = accumulate(ConfusionMatrix.zeros(4, 5), pred, truth, ignore={0})
        np.testing.assert_array_equal(conf.counts, expected)
        self.assertEqual(conf.total, int((truth != 0).sum()))

    def test_shards_merge_to_whole(self):
        rng = np.random.default_rng(1)
        pred, truth = rng.integers(0, 3, 500), rng.integers(0, 3, 500)
        whole = accumulate(ConfusionMatrix.zeros(3, 3), pred, truth)
        first = accumulate(ConfusionMatrix.zeros(3, 3), pred[:200], truth[:200])
        second = accumulate(ConfusionMatrix.zeros(3, 3), pred[200:], truth[200:])
        np.testing.assert_array_equal(first.merge(second).counts, whole.counts)

    def test_out_of_range_label(self):
        with self.assertRaises(LabelMismatchError):
            accumulate(ConfusionMatrix.zeros(2, 2), [0, 2], [0, 1])

    def test_length_mismatch(self):
        with self.assertRaises(LabelMismatchError):
            accumulate(ConfusionMatrix.zeros(2, 2), [0, 1], [0])

    def test_negative_counts_rejected(self):
        with self.assertRaises(ValidationError):
            ConfusionMatrix(np.array([[1, -1]]))


class MappingTestCase(TestCase):
    def test_permuted_identity(self):
        permutation = np.array([2, 0, 3, 1])
        counts = np.zeros((4, 4), dtype=np.int64)
        counts[np.arange(4), permutation] = 10
        mapping = map_clusters_to_classes(ConfusionMatrix(counts))
        np.testing.assert_array_equal(mapping, permutation)

    def test_single_cluster_majority(self):
        mapping = map_clusters_to_classes(ConfusionMatrix(np.array([[3, 9, 1]])))
        np.testing.assert_array_equal(mapping, [1])

    def test_hungarian_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            counts = rng.integers(0, 100, (4, 4))
            mapping = map_clusters_to_classes(ConfusionMatrix(counts))
            best = max(sum(counts[k, p[k]] for k in range(4)) for p in itertools.permutations(range(4)))
            self.assertEqual(sum(counts[k, mapping[k]] for k in range(4)), best)

    def test_empty_confusion(self):
        with self.assertRaises(EmptyInputError):
            map_clusters_to_classes(ConfusionMatrix.zeros(2, 2))


class MiouTestCase(TestCase):
    def test_perfect_prediction(self):
        truth = np.repeat([0, 1, 2], 10)
        conf = accumulate(ConfusionMatrix.zeros(3, 3), truth, truth)
        per_class, mean = miou(conf, map_clusters_to_classes(conf))
        self.assertEqual(mean, 1.0)
        self.assertTrue(all(value == 1.0 for value in per_class.values()))

    def test_hand_computed_example(self):
        conf = ConfusionMatrix(np.array([[50, 10], [10, 30]]))
        per_class, mean = miou(conf, [0, 1])
        self.assertAlmostEqual(per_class[0], 50 / 70, places=12)
        self.assertAlmostEqual(per_class[1], 0.6, places=12)
        self.assertAlmostEqual(mean, (50 / 70 + 0.6) / 2, places=12)
        self.assertAlmostEqual(mean, 0.6571, places=4)

    def test_disjoint_class_scores_zero(self):
        conf = ConfusionMatrix(np.array([[10, 5], [0, 0]]))
        per_class, _ = miou(conf, [0, 1])
        self.assertEqual(per_class[1], 0.0)

    def test_absent_class_excluded(self):
        conf = ConfusionMatrix(np.array([[10, 0, 0], [0, 10, 0]]))
        per_class, mean = miou(conf, [0, 1])
        self.assertIsNone(per_class[2])
        self.assertEqual(mean, 1.0)

    def test_all_classes_absent(self):
        with self.assertRaises(EmptyInputError):
            miou(ConfusionMatrix(np.array([[5, 0], [0, 0]])), [0, 0], classes=[1])

    def test_invariant_to_relabeling(self):
        rng = np.random.default_rng(3)
        truth = rng.integers(0, 4, 2000)
        pred = np.where(rng.random(2000) < 0.7, truth, rng.integers(0, 4, 2000))
        conf = accumulate(ConfusionMatrix.zeros(4, 4), pred, truth)
        _, reference = miou(conf, map_clusters_to_classes(conf))
        for _ in range(100):
            relabel = rng.permutation(4)
            shuffled = accumulate(ConfusionMatrix.zeros(4, 4), relabel[pred], truth)
            _, mean = miou(shuffled, map_clusters_to_classes(shuffled))
            self.assertAlmostEqual(mean, reference, places=12)

    def test_bounds(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            conf = ConfusionMatrix(rng.integers(0, 50, (5, 3)))
            per_class, mean = miou(conf, map_clusters_to_classes(conf))
            self.assertTrue(0.0 <= mean <= 1.0)
            self.assertTrue(all(0.0 <= value <= 1.0 for value in per_class.values() if value is not None))


class ReportTestCase(TestCase):
    def test_identical_labels_give_full_score(self):
        truth = np.repeat([0, 1, 2, 3], 25)
        report = evaluate([(truth - 1 + (truth == 0), truth)], 3, 4, ignore={0},
                          class_names={1: "ground", 2: "building", 3: "vehicle"})
        self.assertEqual(report["miou"], 1.0)
        self.assertEqual(set(report["per_class_iou"]), {"ground", "building", "vehicle"})
        self.assertEqual(report["point_counts"]["total"], 75)
        serializer = MetricsReportSerializer(data=report)
        self.assertTrue(serializer.is_valid(), serializer.errors)
