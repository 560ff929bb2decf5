import os
import tempfile
from unittest import TestCase

import numpy as np
from django.core.exceptions import ValidationError

from cloud.exceptions import ConfigurationError, EmptyInputError
from correspond.models import CorrespondConfig, PairKind
from correspond.services import build_correspondences, positions_of
from dynamics.models import DynamicsConfig
from dynamics.services import detect_frame
from preprocess.services import align_sequence
from synth.models import Block, Floor, SceneClass, SceneObject, SceneSpec
from synth.serializers import SceneSpecSerializer
from synth.services import (
    demo_scene,
    encode_provenance,
    load_sequence,
    random_scene,
    render_frame,
    render_sequence,
    save_sequence,
    scene_from_dict,
    static_layout,
)
from tracking.services import track_sequence


def mover_instances(spec):
    return [instance for instance, item in enumerate(spec.objects, start=1) if item.dynamic]


class RenderTestCase(TestCase):
    def test_static_scene_without_motion_repeats_frames(self):
        spec = SceneSpec(static_layout(), ego_step=(0.0, 0.0, 0.0), noise_sigma=0.0)
        first, later = render_frame(spec, 0), render_frame(spec, 3)
        np.testing.assert_array_equal(first.cloud.xyz, later.cloud.xyz)
        np.testing.assert_array_equal(first.provenance, later.provenance)

    def test_thin_block_moves_one_meter_per_frame(self):
        plate = SceneObject(Block((10.0, 0.0, 0.0), 0.2, 4.0, 2.0), SceneClass.VEHICLE, (1.0, 0.0, 0.0))
        spec = SceneSpec((plate,), floor=None, ego_step=(0.0, 0.0, 0.0), noise_sigma=0.0)
        frames = render_sequence(spec, 4)
        centroids = [frame.cloud.xyz[:, 0].mean() for frame in frames]
        for before, after in zip(centroids, centroids[1:]):
            self.assertAlmostEqual(after - before, 1.0, delta=0.05)
        self.assertTrue(all(frame.is_dynamic.all() for frame in frames))

    def test_noiseless_points_lie_on_their_surfaces(self):
        spec = demo_scene(noise_sigma=0.0)
        for t in (0, 7):
            frame = render_frame(spec, t)
            surfaces = spec.surfaces(t)
            for index, (shape, scene_class, _, _) in enumerate(surfaces):
                members = frame.surface == index
                if not members.any():
                    continue
                self.assertTrue(shape.contains_surface(frame.body_xyz[members], 1e-6).all(), str(shape))
                self.assertTrue((frame.classes[members] == scene_class).all())

    def test_cloud_is_in_sensor_frame(self):
        spec = demo_scene(noise_sigma=0.0)
        frame = render_frame(spec, 5)
        surfaces = spec.surfaces(5)
        floor = frame.surface == 0
        self.assertEqual(surfaces[0][1], SceneClass.GROUND)
        np.testing.assert_allclose(frame.world_xyz[floor, 2], -1.7, atol=1e-6)

    def test_motion_flags_follow_movers(self):
        spec = demo_scene()
        frame = render_frame(spec, 4)
        np.testing.assert_array_equal(frame.is_dynamic, np.isin(frame.instances, mover_instances(spec)))
        self.assertTrue(set(np.unique(frame.instances)) >= set(mover_instances(spec)))

    def test_same_seed_is_bit_identical(self):
        first = render_sequence(demo_scene(), 3, seed=5)
        second = render_sequence(demo_scene(), 3, seed=5)
        other = render_sequence(demo_scene(), 3, seed=6)
        for a, b, c in zip(first, second, other):
            np.testing.assert_array_equal(a.cloud.xyz, b.cloud.xyz)
            self.assertFalse(np.array_equal(a.cloud.xyz, c.cloud.xyz))

    def test_random_scene_is_reproducible(self):
        np.testing.assert_array_equal(
            render_frame(random_scene(3), 2).cloud.xyz,
            render_frame(random_scene(3), 2).cloud.xyz,
        )

    def test_too_short_sequence(self):
        with self.assertRaises(ConfigurationError):
            render_sequence(demo_scene(), 1)

    def test_empty_scene(self):
        with self.assertRaises(EmptyInputError):
            render_sequence(SceneSpec((), floor=None), 5)

    def test_negative_noise_rejected(self):
        with self.assertRaises(ValidationError):
            SceneSpec((), noise_sigma=-0.1)

    def test_provenance_code(self):
        # сетка 6 x 6 x 6 ячеек, ячейка (0, 1, 2)
        code = encode_provenance([3], np.array([[0.1, 0.3, 0.5]]), np.zeros(3), np.ones(3))
        self.assertEqual(int(code[0]), 3 << 24 | 8)

    def test_far_apart_floor_points_have_distinct_codes(self):
        low, high = Floor().body_bounds
        body = np.array([[-25.0, 0.0, 0.0], [26.2, 0.0, 0.0]])
        first, second = encode_provenance([0, 0], body, low, high)
        self.assertNotEqual(first, second)

    def test_floor_codes_unique_within_surface(self):
        low, high = Floor().body_bounds
        xs = np.arange(-49.9, 50.0, 1.0)
        x, y = np.meshgrid(xs, xs, indexing="ij")
        body = np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)])
        codes = encode_provenance(np.zeros(len(body), dtype=np.int64), body, low, high)
        self.assertEqual(len(np.unique(codes)), len(body))

    def test_oversized_surface_rejected(self):
        with self.assertRaises(ConfigurationError):
            encode_provenance([0], np.zeros((1, 3)), [-1000.0, -1000.0, 0.0], [1000.0, 1000.0, 0.0])
        serializer = SceneSpecSerializer(data={"floor": {"extent": 1000.0}})
        self.assertFalse(serializer.is_valid())
        self.assertIn("floor", serializer.errors)


class SequenceFilesTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_then_load(self):
        spec = demo_scene()
        frames = render_sequence(spec, 3, seed=1)
        save_sequence(self.tmp.name, frames)
        self.assertTrue(os.path.exists(os.path.join(self.tmp.name, "labels", "000002.label")))
        loaded = load_sequence(self.tmp.name)
        self.assertEqual(len(loaded), 3)
        for original, restored in zip(frames, loaded):
            np.testing.assert_allclose(restored.cloud.xyz, original.cloud.xyz, rtol=1e-6, atol=1e-5)
            np.testing.assert_array_equal(restored.classes, original.classes)
            np.testing.assert_array_equal(restored.instances, original.instances)
            np.testing.assert_array_equal(restored.is_dynamic, original.is_dynamic)
            np.testing.assert_array_equal(restored.provenance, original.provenance)
            np.testing.assert_allclose(restored.ego_pose.as_matrix(), original.ego_pose.as_matrix(), atol=1e-9)


class SceneSerializerTestCase(TestCase):
    def test_yaml_scene_description(self):
        data = {
            "objects": [
                {"kind": "block", "scene_class": "vehicle", "center": [5, -4, -0.85], "size": [4.5, 1.8, 1.3],
                 "velocity": [1.0, 0, 0]},
                {"kind": "pillar", "scene_class": "person", "center": [8, 3, -1.7], "radius": 0.3, "height": 1.7},
            ],
            "ego_yaw_step_deg": 0.2,
        }
        serializer = SceneSpecSerializer(data=data)
        self.assertTrue(serializer.is_valid(), serializer.errors)
        spec = scene_from_dict(serializer.validated_data)
        self.assertEqual(len(spec.objects), 2)
        self.assertEqual(len(spec.movers), 1)
        self.assertIsNotNone(spec.floor)
        self.assertAlmostEqual(spec.ego_yaw_step, np.radians(0.2))
        self.assertEqual(spec.objects[1].scene_class, SceneClass.PERSON)

    def test_unknown_keys_rejected(self):
        self.assertFalse(SceneSpecSerializer(data={"objectz": []}).is_valid())
        nested = {"objects": [{"kind": "pillar", "scene_class": "person", "center": [0, 0, 0],
                               "radius": 0.3, "height": 1.7, "colour": "red"}]}
        self.assertFalse(SceneSpecSerializer(data=nested).is_valid())

    def test_block_requires_size(self):
        data = {"objects": [{"kind": "block", "scene_class": "building", "center": [0, 0, 0]}]}
        self.assertFalse(SceneSpecSerializer(data=data).is_valid())

    def test_floor_can_be_disabled(self):
        serializer = SceneSpecSerializer(data={"floor": None, "objects": []})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertIsNone(scene_from_dict(serializer.validated_data).floor)


class StaticAlignmentTestCase(TestCase):
    def test_recovered_poses_match_ego_motion(self):
        spec = SceneSpec(static_layout(), ego_yaw_step=np.radians(0.1))
        frames = render_sequence(spec, 10, seed=2)
        aligned = align_sequence([frame.cloud for frame in frames])
        for t, frame in enumerate(frames):
            angle, offset = aligned.poses[t].error_to(frame.ego_pose)
            self.assertLess(angle, 0.5, t)
            self.assertLess(offset, 0.1, t)


class SimulatedPipelineTestCase(TestCase):
    """Авторазметка демо-сцены против истинной разметки симулятора."""

    frames_count = 20

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = demo_scene()
        cls.frames = render_sequence(cls.spec, cls.frames_count, seed=0)
        cls.aligned = align_sequence([frame.cloud for frame in cls.frames])
        cls.detections = [detect_frame(cls.aligned, i, DynamicsConfig()) for i in range(cls.frames_count)]
        cls.tracks = track_sequence([boxes for _, _, boxes in cls.detections])

    def test_dynamic_points_precision_and_recall(self):
        hits = predicted = actual = 0
        for i, (field, mask, _) in enumerate(self.detections):
            truth = self.frames[i].is_dynamic[field.point_ids]
            hits += int((mask & truth).sum())
            predicted += int(mask.sum())
            actual += int(truth.sum())
        self.assertGreater(actual, 0)
        self.assertGreaterEqual(hits / predicted, 0.9)
        self.assertGreaterEqual(hits / actual, 0.9)

    def test_scores_stay_below_one(self):
        for field, _, _ in self.detections:
            self.assertTrue(((field.scores >= 0) & (field.scores < 1)).all())

    def test_each_mover_gets_one_track(self):
        owners = {}
        for track in self.tracks:
            members = np.concatenate([
                self.frames[frame].instances[box.point_ids] for frame, box in track.boxes.items()
            ])
            owner = int(np.bincount(members).argmax())
            owners.setdefault(owner, []).append(track.id)
        for instance in mover_instances(self.spec):
            self.assertEqual(len(owners.get(instance, [])), 1, f"{instance}: {owners}")

    def test_correspondences_agree_with_provenance(self):
        a, b = 12, 7
        corr = build_correspondences(self.aligned, self.tracks, a, b, CorrespondConfig(static_max_dist=0.15))
        frame_a, frame_b = self.frames[a], self.frames[b]
        rows_a = positions_of(frame_a.cloud, corr.ids_a)
        rows_b = positions_of(frame_b.cloud, corr.ids_b)
        same_surface = frame_a.surface[rows_a] == frame_b.surface[rows_b]
        close = np.linalg.norm(frame_a.body_xyz[rows_a] - frame_b.body_xyz[rows_b], axis=1) <= 0.2

        static = corr.of_kind(PairKind.STATIC)
        dynamic = corr.of_kind(PairKind.DYNAMIC)
        self.assertGreater(static.sum(), 1000)
        self.assertGreater(dynamic.sum(), 0)
        self.assertGreaterEqual((same_surface & close)[static].mean(), 0.9)
        self.assertGreaterEqual(same_surface[dynamic].mean(), 0.95)
        self.assertFalse(set(corr.ids_b[static]) & set(corr.ids_b[dynamic]))
