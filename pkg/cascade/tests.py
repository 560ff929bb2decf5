import math
from unittest import TestCase

import numpy as np
from django.core.exceptions import ValidationError

from cascade.models import CascadeClass, CascadeConfig, FgBgLabel, FgBgModel, FgBgPseudoLabel, FgBgSample
from cascade.services import (
    IGNORED,
    apply_mapping,
    cascade_report,
    cascade_segment,
    fgbg_report,
    fgbg_step,
    foreground_sequence,
    group_truth,
    heuristic_labels,
    pseudo_labels,
    rmse_loss,
    simple_threshold_labels,
    train_fgbg,
)
from cloud.exceptions import ConfigurationError, EmptyInputError
from cloud.models import PointCloud, SensorFov, SensorPreset
from correspond.models import CorrespondenceSet, PairKind
from dynamics.models import DynamicScoreField
from dynamics.services import dynamic_scores
from learn.models import AugmentConfig, EmbeddingNet, PreparedView, TrainConfig, TrainingSequence
from learn.network import forward
from preprocess.models import AlignConfig
from preprocess.services import align_sequence, filter_frame
from synth.models import SceneSpec
from synth.services import demo_scene, render_frame, render_sequence, static_layout

SMALL_PRESET = SensorPreset(16, 64, SensorFov.from_degrees(15.0, 15.0))
NO_AUGMENT = AugmentConfig(translate=False, flip=False, rotate=False, downsample=False)


def make_cloud(rng, n=600, frame_index=0):
    """Точки вокруг сенсора; интенсивность 1 у переднего плана (верхняя половина по высоте)."""
    azimuth = rng.uniform(-math.pi, math.pi, n)
    elevation = rng.uniform(-0.2, 0.2, n)
    distance = rng.uniform(5.0, 20.0, n)
    xyz = np.column_stack([
        distance * np.cos(elevation) * np.cos(azimuth),
        distance * np.cos(elevation) * np.sin(azimuth),
        distance * np.sin(elevation),
    ])
    return PointCloud(xyz, (elevation > 0).astype(np.float64), frame_index=frame_index)


def intensity_labels(cloud):
    return FgBgPseudoLabel(np.where(cloud.intensity > 0.5, FgBgLabel.FOREGROUND, FgBgLabel.BACKGROUND),
                           cloud.frame_index, "dynamic")


def constant_model(bias):
    net = EmbeddingNet.initialize(channels=1, hidden=3, output="sigmoid")
    net.params["w3"][:] = 0.0
    net.params["b3"][:] = bias
    return FgBgModel(net)


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / scale


def numeric_gradient(function, array, h=1e-5):
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        saved = array[index]
        array[index] = saved + h
        plus = function()
        array[index] = saved - h
        minus = function()
        array[index] = saved
        grad[index] = (plus - minus) / (2 * h)
    return grad


def instance_of(spec, name):
    return next(instance for instance, item in enumerate(spec.objects, start=1) if item.name == name)


class SimpleThresholdTestCase(TestCase):
    def test_threshold_split(self):
        field = DynamicScoreField(np.array([0.1, 0.7, 0.5]), np.array([1, 2, 4]), 0, 3, 1.0)
        labels = simple_threshold_labels(field, 0.5, size=6)
        np.testing.assert_array_equal(labels.labels, [0, 0, 1, 0, 1, 0])

    def test_zero_threshold_marks_everything_foreground(self):
        field = DynamicScoreField(np.array([0.0, 0.2, 0.9]), np.arange(3), 0, 3, 1.0)
        self.assertTrue((simple_threshold_labels(field, 0.0).labels == FgBgLabel.FOREGROUND).all())

    def test_uncertain_only_in_heuristic_variant(self):
        with self.assertRaises(ValidationError):
            FgBgPseudoLabel(np.array([0, 2]), 0, "dynamic")
        self.assertEqual(FgBgPseudoLabel(np.array([0, 2]), 0, "heuristic").count(FgBgLabel.UNCERTAIN), 1)


class HeuristicLabelsTestCase(TestCase):
    """Статический кадр симулятора: фасады, столбы и припаркованная машина."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = SceneSpec(static_layout(), noise_sigma=0.0)
        cls.frame = render_frame(cls.spec, 0)
        cloud = cls.frame.cloud
        _, cls.keep, cls.plane = filter_frame(cloud, AlignConfig())
        cls.car = (cls.frame.instances == instance_of(cls.spec, "parked car")) & cls.keep
        cls.buildings = np.isin(cls.frame.instances, [instance_of(cls.spec, "front"), instance_of(cls.spec, "rear")])
        cls.buildings &= cls.keep

    def field(self, scores=None):
        ids = self.frame.cloud.point_ids[self.keep]
        if scores is None:
            scores = np.zeros(len(ids))
        return DynamicScoreField(scores, ids, 0, 3, 1.0)

    def test_parked_car_is_background_for_simple_threshold(self):
        labels = simple_threshold_labels(self.field(), 0.5, len(self.frame.cloud))
        self.assertTrue((labels.labels[self.car] == FgBgLabel.BACKGROUND).all())

    def test_parked_car_is_uncertain(self):
        labels = heuristic_labels(self.frame.cloud, self.field(), self.plane).labels
        self.assertGreater(self.car.sum(), 100)
        self.assertGreaterEqual((labels[self.car] == FgBgLabel.UNCERTAIN).mean(), 0.9)
        self.assertTrue((labels[self.buildings] == FgBgLabel.BACKGROUND).all())

    def test_moving_car_is_foreground(self):
        scores = np.where(self.car[self.keep], 0.9, 0.0)
        labels = heuristic_labels(self.frame.cloud, self.field(scores), self.plane).labels
        self.assertTrue((labels[self.car] == FgBgLabel.FOREGROUND).all())
        self.assertFalse((labels == FgBgLabel.UNCERTAIN).any())

    def test_without_plane_nothing_is_uncertain(self):
        with self.assertLogs("cascade.services", level="WARNING"):
            labels = heuristic_labels(self.frame.cloud, self.field(), None)
        self.assertEqual(labels.count(FgBgLabel.UNCERTAIN), 0)

    def test_deterministic(self):
        first = heuristic_labels(self.frame.cloud, self.field(), self.plane).labels
        second = heuristic_labels(self.frame.cloud, self.field(), self.plane).labels
        np.testing.assert_array_equal(first, second)


class MovingPedestrianTestCase(TestCase):
    def test_pedestrian_is_foreground(self):
        spec = demo_scene()
        frames = render_sequence(spec, 7, seed=3)
        aligned = align_sequence([frame.cloud for frame in frames])
        field = dynamic_scores(aligned, 3)
        labels = simple_threshold_labels(field, 0.5, len(frames[3].cloud)).labels
        pedestrian = frames[3].instances[field.point_ids] == instance_of(spec, "pedestrian")
        self.assertGreater(pedestrian.sum(), 20)
        self.assertGreaterEqual((labels[field.point_ids[pedestrian]] == FgBgLabel.FOREGROUND).mean(), 0.9)

    def test_single_shot_has_no_pseudo_labels(self):
        with self.assertRaises(ConfigurationError):
            pseudo_labels(None, [], CascadeConfig(variant="single-shot"))


class RmseTestCase(TestCase):
    def test_value(self):
        loss, grad = rmse_loss([0.5, 0.5], [0.0, 1.0])
        self.assertAlmostEqual(loss, 0.5)
        np.testing.assert_allclose(grad, [0.5, -0.5])

    def test_perfect_prediction(self):
        loss, grad = rmse_loss([1.0, 0.0], [1.0, 0.0])
        self.assertEqual(loss, 0.0)
        self.assertFalse(grad.any())

    def check_head_gradient(self, seed):
        rng = np.random.default_rng(seed)
        net = EmbeddingNet.initialize(channels=1, hidden=3, seed=seed, output="sigmoid")
        valid = rng.random((6, 10)) < 0.8
        x = np.where(valid[..., None], rng.normal(size=(6, 10, 5)), 0.0)
        size = int(valid.sum())
        view = PreparedView((x, valid), np.arange(size), np.arange(size))
        targets = rng.integers(0, 3, size).astype(np.uint8)
        sample = FgBgSample(view, targets)
        known = targets != FgBgLabel.UNCERTAIN

        def loss():
            out = forward(net, (x, valid)).vectors()[:, 0]
            return rmse_loss(out[known], (targets[known] == FgBgLabel.FOREGROUND).astype(np.float64))[0]

        _, _, analytic = fgbg_step(net, 0.5, sample)
        for name, value in net.params.items():
            self.assertLess(relative_error(analytic[name], numeric_gradient(loss, value)), 1e-4, name)

    def test_sigmoid_head_gradient_matches_finite_differences(self):
        for seed in range(20):
            with self.subTest(seed=seed):
                self.check_head_gradient(seed)


class TrainFgBgTestCase(TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.frames = [make_cloud(rng, frame_index=t) for t in range(3)]
        self.labels = [intensity_labels(cloud) for cloud in self.frames]

    def config(self, **overrides):
        values = dict(epochs=3, samples=4, batch_size=4, lr=0.0, hidden=4, augment=NO_AUGMENT)
        values.update(overrides)
        return CascadeConfig(**values)

    def test_zero_learning_rate_gives_constant_outputs(self):
        model = train_fgbg(self.frames, self.labels, SMALL_PRESET, self.config())
        initial = EmbeddingNet.initialize(channels=1, hidden=4, seed=0, output="sigmoid")
        for name, value in initial.params.items():
            np.testing.assert_array_equal(model.net.params[name], value)
        losses = [record["rmse"] for record in model.log]
        for value in losses[1:]:
            self.assertAlmostEqual(value, losses[0], places=12)

    def test_separable_scene_reduces_loss(self):
        model = train_fgbg(self.frames, self.labels, SMALL_PRESET, self.config(lr=0.05, epochs=8, decay_at=1.0))
        self.assertLess(model.log[-1]["rmse"], model.log[0]["rmse"])

    def test_single_class_aborts(self):
        background = [FgBgPseudoLabel(np.zeros(len(cloud)), t, "dynamic") for t, cloud in enumerate(self.frames)]
        with self.assertRaises(EmptyInputError):
            train_fgbg(self.frames, background, SMALL_PRESET, self.config())

    def test_uncertain_points_do_not_contribute(self):
        rng = np.random.default_rng(1)
        net = EmbeddingNet.initialize(channels=1, hidden=3, output="sigmoid")
        valid = np.ones((4, 8), dtype=bool)
        view = PreparedView((rng.normal(size=(4, 8, 5)), valid), np.arange(32), np.arange(32))
        loss, counts, grads = fgbg_step(net, 0.5, FgBgSample(view, np.full(32, FgBgLabel.UNCERTAIN, np.uint8)))
        self.assertEqual(loss, 0.0)
        self.assertFalse(counts.any())
        self.assertTrue(all(not value.any() for value in grads.values()))


class CascadeSegmentTestCase(TestCase):
    def make_sequence(self):
        rng = np.random.default_rng(2)
        return TrainingSequence(tuple(make_cloud(rng, frame_index=t) for t in range(2)), SMALL_PRESET)

    def config(self):
        learn = TrainConfig(mode="st", epochs=1, samples=2, batch_size=2, k=2, channels=4, hidden=3, lr=0.01)
        return CascadeConfig(learn=learn)

    def test_all_background(self):
        sequence = self.make_sequence()
        result = cascade_segment(constant_model(-50.0), [sequence], self.config())
        for cloud, labels in zip(sequence.frames, result.labels[0]):
            self.assertEqual(len(labels), len(cloud))
            self.assertFalse(labels.any())
        self.assertIsNone(result.train_result)

    def test_all_foreground_gets_two_clusters(self):
        sequence = self.make_sequence()
        with self.assertLogs("cascade.services", level="WARNING"):
            result = cascade_segment(constant_model(50.0), [sequence], self.config())
        for cloud, labels in zip(sequence.frames, result.labels[0]):
            self.assertEqual(len(labels), len(cloud))
            self.assertTrue(((labels == 1) | (labels == 2)).all())

    def test_foreground_keeps_dynamic_pairs_only(self):
        sequence = self.make_sequence()
        ids = np.arange(10)
        kinds = np.array([PairKind.STATIC, PairKind.DYNAMIC] * 5)
        corr = CorrespondenceSet(1, 0, ids, ids, kinds, 1.0, False)
        sequence = TrainingSequence(sequence.frames, SMALL_PRESET, {(1, 0): corr})
        masks = [np.arange(len(cloud)) < 6 for cloud in sequence.frames]
        foreground = foreground_sequence(sequence, masks)
        kept = foreground.correspondences[(1, 0)]
        np.testing.assert_array_equal(kept.ids_a, [1, 3, 5])
        self.assertTrue((kept.kinds == PairKind.DYNAMIC).all())
        self.assertEqual([len(cloud) for cloud in foreground.frames], [6, 6])


class CascadeReportTestCase(TestCase):
    def test_group_truth(self):
        np.testing.assert_array_equal(group_truth([0, 1, 2, 3, 4]), [IGNORED, 0, 0, 1, 2])
        with self.assertRaises(ConfigurationError):
            group_truth([1], "poss")

    def test_foreground_clusters_mapped_to_vehicle_and_people(self):
        pred = np.array([0, 0, 1, 1, 2, 2, 0])
        truth = np.array([0, 0, 2, 2, 1, 1, IGNORED])
        report = cascade_report([(pred, truth)])
        self.assertEqual(report["miou"], 1.0)
        self.assertEqual(report["mapping"], {"0": CascadeClass.BACKGROUND, "1": CascadeClass.PEOPLE,
                                             "2": CascadeClass.VEHICLE})
        self.assertEqual(report["point_counts"]["total"], 6)
        np.testing.assert_array_equal(apply_mapping(pred[:6], report), truth[:6])

    def test_single_shot_maps_every_cluster(self):
        pred = np.array([2, 2, 0, 0, 1, 1])
        truth = np.array([0, 0, 1, 1, 2, 2])
        self.assertEqual(cascade_report([(pred, truth)], variant="single-shot")["miou"], 1.0)

    def test_fgbg_report(self):
        report = fgbg_report([(np.array([False, True, True, False]), np.array([0, 1, 2, IGNORED]))])
        self.assertEqual(report["per_class_iou"], {"background": 1.0, "foreground": 1.0})
