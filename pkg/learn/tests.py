import json
import math
import os
import tempfile
from unittest import TestCase

import numpy as np
from sklearn.cluster import KMeans

from cloud.exceptions import EmptyInputError, MalformedFileError, ShapeMismatchError
from cloud.models import PointCloud, SensorFov, SensorPreset
from cloud.services import project_to_range_image
from correspond.models import CorrespondenceSet, PairKind
from dynamics.services import fit_box
from learn.augment import IDENTITY, GeomTransform, random_transform
from learn.clustering import assign, minibatch_kmeans
from learn.losses import (
    assign_groups,
    discriminative_loss,
    proto_ce_loss,
    spatiotemporal_loss,
    within_cross_losses,
)
from learn.models import (
    AugmentConfig,
    EmbeddingNet,
    Group,
    KMeansConfig,
    TrainConfig,
    TrainingSequence,
)
from learn.network import backward, forward
from learn.optim import Adam, step_decay
from learn.services import build_samples, load_checkpoint, prepare_view, save_checkpoint, segment, train

SMALL_PRESET = SensorPreset(16, 64, SensorFov.from_degrees(15.0, 15.0))


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / scale


def numeric_gradient(function, array, h=1e-4):
    """Центральные разности по всем элементам array (изменяется на месте и восстанавливается)."""
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


def random_inputs(rng, height=8, width=16):
    valid = rng.random((height, width)) < 0.8
    x = np.where(valid[..., None], rng.normal(size=(height, width, 5)), 0.0)
    return x, valid


def make_cloud(rng, n=600, frame_index=0):
    azimuth = rng.uniform(-math.pi, math.pi, n)
    elevation = rng.uniform(-0.2, 0.2, n)
    distance = rng.uniform(5.0, 20.0, n)
    xyz = np.column_stack([
        distance * np.cos(elevation) * np.cos(azimuth),
        distance * np.cos(elevation) * np.sin(azimuth),
        distance * np.sin(elevation),
    ])
    return PointCloud(xyz, rng.random(n), frame_index=frame_index)


class ForwardTestCase(TestCase):
    def test_constant_field(self):
        net = EmbeddingNet.initialize(channels=4, hidden=3, seed=1)
        net.params["w3"][:] = 0.0
        net.params["b3"][:] = [1.0, 2.0, 2.0, 0.0]
        x, valid = random_inputs(np.random.default_rng(0))
        field = forward(net, (x, valid))
        np.testing.assert_allclose(field.vectors(), np.tile([1 / 3, 2 / 3, 2 / 3, 0.0], (valid.sum(), 1)))
        self.assertTrue((field.features[~valid] == 0).all())

    def test_deterministic(self):
        net = EmbeddingNet.initialize(channels=8, hidden=4, seed=2)
        inputs = random_inputs(np.random.default_rng(3))
        np.testing.assert_array_equal(forward(net, inputs).features, forward(net, inputs).features)

    def test_unit_norm(self):
        net = EmbeddingNet.initialize(channels=8, hidden=4, seed=4)
        field = forward(net, random_inputs(np.random.default_rng(5)))
        np.testing.assert_allclose(np.linalg.norm(field.vectors(), axis=1), 1.0, atol=1e-6)

    def test_range_image_input(self):
        rv = project_to_range_image(make_cloud(np.random.default_rng(6)), 16, 64, SMALL_PRESET.fov)
        field = forward(EmbeddingNet.initialize(channels=4, hidden=3), rv, expected_shape=(16, 64))
        self.assertEqual(field.shape, (16, 64, 4))
        np.testing.assert_array_equal(field.valid_mask, rv.valid_mask)

    def test_shape_mismatch(self):
        rv = project_to_range_image(make_cloud(np.random.default_rng(6)), 16, 64, SMALL_PRESET.fov)
        with self.assertRaises(ShapeMismatchError):
            forward(EmbeddingNet.initialize(channels=4, hidden=3), rv, expected_shape=(64, 1024))


class BackwardTestCase(TestCase):
    def check_gradients(self, output, seed):
        rng = np.random.default_rng(seed)
        net = EmbeddingNet.initialize(channels=4, hidden=3, seed=seed, output=output)
        for name in ("b1", "b2", "b3"):
            net.params[name][:] = rng.normal(scale=0.1, size=net.params[name].shape)
        inputs = random_inputs(rng, height=6, width=10)
        upstream = rng.normal(size=(6, 10, 4))

        def loss():
            return float((forward(net, inputs).features * upstream).sum())

        analytic = backward(net, forward(net, inputs), upstream)
        for name, value in net.params.items():
            self.assertLess(relative_error(analytic[name], numeric_gradient(loss, value)), 1e-4, name)

    def test_normalized_output_matches_finite_differences(self):
        for seed in range(20):
            with self.subTest(seed=seed):
                self.check_gradients("normalize", seed)

    def test_sigmoid_output_matches_finite_differences(self):
        for seed in range(20):
            with self.subTest(seed=seed):
                self.check_gradients("sigmoid", 100 + seed)

    def test_zero_upstream(self):
        net = EmbeddingNet.initialize(channels=4, hidden=3)
        field = forward(net, random_inputs(np.random.default_rng(0)))
        for value in backward(net, field, np.zeros((8, 16, 4))).values():
            self.assertFalse(value.any())

    def test_linear_in_upstream(self):
        net = EmbeddingNet.initialize(channels=4, hidden=3)
        rng = np.random.default_rng(1)
        field = forward(net, random_inputs(rng))
        upstream = rng.normal(size=(8, 16, 4))
        single = backward(net, field, upstream)
        double = backward(net, field, 2 * upstream)
        for name in single:
            np.testing.assert_allclose(double[name], 2 * single[name])


class ProtoLossTestCase(TestCase):
    def test_single_cluster_is_zero(self):
        loss, grad = proto_ce_loss(np.eye(3), np.zeros(3, dtype=int), np.array([[1.0, 0.0, 0.0]]))
        self.assertEqual(loss, 0.0)
        self.assertFalse(grad.any())

    def test_equidistant_is_log_two(self):
        loss, _ = proto_ce_loss(np.array([[1.0, 0.0]]), np.array([0]), np.array([[0.0, 1.0], [0.0, -1.0]]))
        self.assertAlmostEqual(loss, math.log(2.0), places=12)

    def test_gradient_matches_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            features = rng.normal(size=(6, 4))
            labels = rng.integers(0, 3, 6)
            centroids = rng.normal(size=(3, 4))
            _, grad = proto_ce_loss(features, labels, centroids, 0.7)
            numeric = numeric_gradient(lambda: proto_ce_loss(features, labels, centroids, 0.7)[0], features)
            self.assertLess(relative_error(grad, numeric), 1e-4)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(3)
        features = rng.normal(size=(10, 3))
        labels = rng.integers(0, 2, 10)
        centroids = rng.normal(size=(2, 3))
        direct = 0.0
        for z, label in zip(features, labels):
            logits = [
                -(1 - z @ mu / (np.linalg.norm(z) * np.linalg.norm(mu))) / 0.5 for mu in centroids
            ]
            direct -= logits[label] - math.log(sum(math.exp(value) for value in logits))
        self.assertAlmostEqual(proto_ce_loss(features, labels, centroids, 0.5)[0], direct / 10, places=10)


class ViewLossTestCase(TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.features = rng.normal(size=(20, 4))
        self.labels = rng.integers(0, 3, 20)
        self.centroids = rng.normal(size=(3, 4))
        self.rows = np.arange(20)

    def test_identical_views_within_equals_cross(self):
        terms = within_cross_losses(self.features, self.features, self.rows, self.rows, self.labels, self.labels,
                                    self.centroids, self.centroids)
        self.assertAlmostEqual(terms.values["within"], terms.values["cross"], places=12)
        self.assertAlmostEqual(terms.total, 2 * terms.values["within"], places=12)

    def test_no_shared_points(self):
        with self.assertRaises(EmptyInputError):
            within_cross_losses(self.features, self.features, np.empty(0, dtype=int), np.empty(0, dtype=int),
                                self.labels, self.labels, self.centroids, self.centroids)

    def test_same_frame_spatiotemporal_equals_cross(self):
        terms = within_cross_losses(self.features, self.features, self.rows, self.rows, self.labels, self.labels,
                                    self.centroids, self.centroids)
        loss, _, _ = spatiotemporal_loss(self.features, self.features, self.rows, self.rows, self.labels,
                                         self.labels, self.centroids, self.centroids)
        self.assertAlmostEqual(loss, terms.values["cross"], places=12)

    def test_empty_correspondences_give_zero(self):
        with self.assertLogs("learn.losses", level="WARNING"):
            loss, grad_t, grad_tk = spatiotemporal_loss(
                self.features, self.features, np.empty(0, dtype=int), np.empty(0, dtype=int),
                self.labels, self.labels, self.centroids, self.centroids,
            )
        self.assertEqual(loss, 0.0)
        self.assertFalse(grad_t.any() or grad_tk.any())

    def test_spatiotemporal_gradient_matches_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            f_t, f_tk = rng.normal(size=(8, 3)), rng.normal(size=(9, 3))
            rows_t, rows_tk = rng.permutation(8)[:5], rng.permutation(9)[:5]
            labels_t, labels_tk = rng.integers(0, 2, 8), rng.integers(0, 2, 9)
            centroids_t, centroids_tk = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

            def loss():
                return spatiotemporal_loss(f_t, f_tk, rows_t, rows_tk, labels_t, labels_tk,
                                           centroids_t, centroids_tk)[0]

            _, grad_t, grad_tk = spatiotemporal_loss(f_t, f_tk, rows_t, rows_tk, labels_t, labels_tk,
                                                     centroids_t, centroids_tk)
            self.assertLess(relative_error(grad_t, numeric_gradient(loss, f_t)), 1e-4)
            self.assertLess(relative_error(grad_tk, numeric_gradient(loss, f_tk)), 1e-4)


class DiscriminativeLossTestCase(TestCase):
    def test_identical_features_single_group(self):
        loss, grad = discriminative_loss(np.ones((10, 3)), np.full(10, Group.GROUND))
        self.assertEqual(loss, 0.0)
        self.assertFalse(grad.any())

    def test_separated_groups(self):
        features = np.vstack([np.zeros((5, 2)), np.tile([5.0, 0.0], (5, 1))])
        groups = np.repeat([Group.SMALL_DYNAMIC, Group.LARGE_STATIC], 5)
        self.assertEqual(discriminative_loss(features, groups, 0.5, 1.5)[0], 0.0)

    def test_unassigned_points_ignored(self):
        features = np.random.default_rng(0).normal(size=(6, 2))
        loss, grad = discriminative_loss(features, np.full(6, Group.NONE))
        self.assertEqual(loss, 0.0)
        self.assertFalse(grad.any())

    def test_gradient_matches_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            features = rng.normal(size=(12, 3))
            groups = rng.integers(-1, 3, 12)
            groups[:3] = [0, 1, 2]
            _, grad = discriminative_loss(features, groups)
            numeric = numeric_gradient(lambda: discriminative_loss(features, groups)[0], features)
            self.assertLess(relative_error(grad, numeric), 1e-4)


class AssignGroupsTestCase(TestCase):
    def test_pure_ground(self):
        groups = assign_groups(50, np.ones(50, dtype=bool), [], [], lambda ids: ids)
        self.assertTrue((groups == Group.GROUND).all())

    def test_size_threshold(self):
        rng = np.random.default_rng(0)
        pedestrian = rng.uniform([0, 0, 0], [0.6, 0.5, 1.7], size=(40, 3))
        building = rng.uniform([10, 10, 0], [20, 15, 6], size=(40, 3))
        dynamic = [fit_box(pedestrian, np.arange(40))]
        static = [fit_box(building, np.arange(40, 80))]
        ground = np.zeros(100, dtype=bool)
        ground[90:] = True
        groups = assign_groups(100, ground, dynamic, static, lambda ids: ids)
        self.assertTrue((groups[:40] == Group.SMALL_DYNAMIC).all())
        self.assertTrue((groups[40:80] == Group.LARGE_STATIC).all())
        self.assertTrue((groups[80:90] == Group.NONE).all())
        self.assertTrue((groups[90:] == Group.GROUND).all())


class KMeansTestCase(TestCase):
    def test_constant_fields(self):
        fields = [np.tile([1.0, 0.0, 0.0], (50, 1)), np.tile([0.0, 1.0, 0.0], (60, 1))]
        result = minibatch_kmeans(fields, 2, seed=3)
        self.assertEqual(len(set(result.labels[0])), 1)
        self.assertEqual(len(set(result.labels[1])), 1)
        self.assertNotEqual(result.labels[0][0], result.labels[1][0])
        np.testing.assert_allclose(result.centroids[result.labels[0][0]], [1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(result.centroids[result.labels[1][0]], [0.0, 1.0, 0.0], atol=1e-12)

    def test_single_cluster_is_normalized_mean(self):
        vectors = np.random.default_rng(1).normal(size=(200, 4))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        result = minibatch_kmeans([vectors], 1, seed=0)
        mean = vectors.mean(axis=0)
        np.testing.assert_allclose(result.centroids[0], mean / np.linalg.norm(mean), atol=1e-9)
        self.assertFalse(result.labels[0].any())

    def test_full_batch_close_to_multi_restart_reference(self):
        points = np.random.default_rng(2).uniform(-1, 1, size=(300, 2))
        cfg = KMeansConfig(iters=50, n_init=20, full_batch=True)
        result = minibatch_kmeans([points], 3, cfg, seed=0, spherical=False)
        reference = KMeans(n_clusters=3, n_init=1000, random_state=0).fit(points)
        self.assertLessEqual(result.objective, 1.05 * reference.inertia_ / len(points))

    def test_objective_history_non_increasing(self):
        rng = np.random.default_rng(4)
        for seed in range(5):
            fields = [rng.normal(size=(400, 3)) for _ in range(3)]
            result = minibatch_kmeans(fields, 4, KMeansConfig(iters=30, batch_size=64), seed=seed)
            self.assertTrue((np.diff(result.history) <= 1e-12).all())

    def test_too_few_vectors(self):
        with self.assertRaises(EmptyInputError):
            minibatch_kmeans([np.ones((2, 3))], 3)

    def test_assignment_invariant_to_rotation(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(100, 4))
        centroids = rng.normal(size=(5, 4))
        rotation, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        np.testing.assert_array_equal(assign(points, centroids)[0], assign(points @ rotation, centroids @ rotation)[0])


class AugmentTestCase(TestCase):
    def setUp(self):
        self.cloud = make_cloud(np.random.default_rng(0), n=100)

    def test_flip_twice_is_identity(self):
        flip = GeomTransform(flip=True)
        np.testing.assert_array_equal(flip.apply(flip.apply(self.cloud)).xyz, self.cloud.xyz)

    def test_rotation_twice_is_identity(self):
        rotation = GeomTransform(rot180=True)
        np.testing.assert_array_equal(rotation.apply(rotation.apply(self.cloud)).xyz, self.cloud.xyz)

    def test_full_keep_ratio_is_identity(self):
        np.testing.assert_array_equal(IDENTITY.apply(self.cloud).xyz, self.cloud.xyz)

    def test_downsample_is_subset(self):
        reduced = GeomTransform(keep_ratio=0.5, seed=1).apply(self.cloud)
        self.assertEqual(len(reduced), 50)
        self.assertTrue(np.isin(reduced.point_ids, self.cloud.point_ids).all())
        np.testing.assert_array_equal(reduced.xyz, self.cloud.xyz[reduced.point_ids])

    def test_disabled_augmentations(self):
        cfg = AugmentConfig(translate=False, flip=False, rotate=False, downsample=False)
        transform = random_transform(np.random.default_rng(0), cfg)
        np.testing.assert_array_equal(transform.apply(self.cloud).xyz, self.cloud.xyz)


class OptimTestCase(TestCase):
    def test_zero_learning_rate(self):
        params = {"w": np.ones(3)}
        Adam(params, lr=0.0).step({"w": np.array([1.0, -2.0, 3.0])})
        np.testing.assert_array_equal(params["w"], np.ones(3))

    def test_step_against_gradient(self):
        params = {"w": np.zeros(2)}
        Adam(params, lr=0.1).step({"w": np.array([1.0, -1.0])})
        np.testing.assert_allclose(params["w"], [-0.1, 0.1], rtol=1e-6)

    def test_step_decay(self):
        self.assertEqual(step_decay(0.05, 3, 10), 0.05)
        self.assertAlmostEqual(step_decay(0.05, 4, 10), 0.005)
        self.assertAlmostEqual(step_decay(0.05, 1, 2), 0.005)


class TrainTestCase(TestCase):
    def make_sequence(self, frames=3):
        rng = np.random.default_rng(0)
        clouds = tuple(make_cloud(rng, frame_index=t) for t in range(frames))
        return TrainingSequence(clouds, SMALL_PRESET)

    def small_config(self, **overrides):
        values = dict(mode="baseline", epochs=3, samples=2, batch_size=2, lr=0.0, k=3, channels=4, hidden=3)
        values.update(overrides)
        return TrainConfig(**values)

    def test_zero_learning_rate_keeps_parameters(self):
        cfg = self.small_config()
        result = train([self.make_sequence()], cfg)
        initial = EmbeddingNet.initialize(cfg.channels, cfg.hidden, cfg.seed)
        for name, value in initial.params.items():
            np.testing.assert_array_equal(result.net.params[name], value)
        totals = [record["total"] for record in result.log]
        self.assertEqual(len(totals), 3)
        for total in totals[1:]:
            self.assertAlmostEqual(total, totals[0], places=9)

    def test_log_records_terms_and_history(self):
        with tempfile.TemporaryDirectory() as workdir:
            path = os.path.join(workdir, "train.jsonl")
            result = train([self.make_sequence()], self.small_config(lr=0.01, epochs=2), log_path=path)
            with open(path) as stream:
                records = [json.loads(line) for line in stream]
        self.assertEqual(len(records), 2)
        for record in records:
            self.assertTrue({"epoch", "lr", "within", "cross", "total", "kmeans_objective"} <= set(record))
            for history in record["kmeans_history"]:
                self.assertTrue((np.diff(history) <= 1e-12).all())
        self.assertEqual(result.centroids.shape, (3, 4))

    def test_spatiotemporal_mode_uses_correspondences(self):
        sequence = self.make_sequence(frames=2)
        ids = sequence.frames[0].point_ids[:300]
        corr = CorrespondenceSet(1, 0, ids, ids, np.full(300, PairKind.STATIC), 1.0, False)
        sequence = TrainingSequence(sequence.frames, SMALL_PRESET, {(1, 0): corr})
        cfg = self.small_config(mode="st", lr=0.01, epochs=1)
        samples = build_samples([sequence], cfg, np.random.default_rng(0))
        self.assertTrue(all((s.frame_a, s.frame_b) == (1, 0) for s in samples))
        self.assertTrue(all(len(s.rows_a) for s in samples))
        result = train([sequence], cfg)
        self.assertIn("st", result.log[0])
        self.assertNotIn("cross", result.log[0])

    def test_spatiotemporal_mode_requires_correspondences(self):
        with self.assertRaises(EmptyInputError):
            build_samples([self.make_sequence()], self.small_config(mode="st"), np.random.default_rng(0))

    def test_prepared_view_lookup(self):
        cloud = make_cloud(np.random.default_rng(1))
        view = prepare_view(cloud, SMALL_PRESET)
        rows = view.rows_of(view.owner_ids)
        np.testing.assert_array_equal(rows, np.arange(view.size))
        self.assertEqual(view.size, view.inputs[1].sum())


class SegmentCheckpointTestCase(TestCase):
    def test_every_point_labelled(self):
        cloud = make_cloud(np.random.default_rng(2), n=2000)
        net = EmbeddingNet.initialize(channels=4, hidden=3)
        centroids = np.eye(4)[:3]
        labels = segment(net, cloud, centroids, SMALL_PRESET)
        self.assertEqual(len(labels), len(cloud))
        self.assertTrue(((labels >= 0) & (labels < 3)).all())

    def test_checkpoint_round_trip(self):
        net = EmbeddingNet.initialize(channels=4, hidden=3, seed=5)
        centroids = np.eye(4)[:2]
        with tempfile.TemporaryDirectory() as workdir:
            path = os.path.join(workdir, "model.ckpt")
            save_checkpoint(path, net, centroids, {"mode": "st"})
            loaded, loaded_centroids, config = load_checkpoint(path)
        for name, value in net.params.items():
            np.testing.assert_allclose(loaded.params[name], value, rtol=1e-6)
        np.testing.assert_array_equal(loaded_centroids, centroids)
        self.assertEqual(config, {"mode": "st"})

    def test_rejects_foreign_file(self):
        with tempfile.NamedTemporaryFile(suffix=".ckpt") as stream:
            stream.write(b"not a checkpoint")
            stream.flush()
            with self.assertRaises(MalformedFileError):
                load_checkpoint(stream.name)
