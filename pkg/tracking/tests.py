import csv
import math
import os
import tempfile
from unittest import TestCase

import numpy as np
from django.core.exceptions import ValidationError

from dynamics.models import BoxInstance
from tracking.models import CostMatrix, Track, TrackingConfig, TrackRegistry
from tracking.services import (
    build_cost_matrix,
    load_tracks,
    save_tracks,
    solve_assignment,
    step_tracks,
    track_sequence,
    write_tracks_csv,
)


def make_box(center, frame=0, length=4.0, width=2.0, height=1.5, heading=0.0, ids=None):
    return BoxInstance(center, heading, length, width, height, np.arange(30) if ids is None else ids, frame)


def brute_force(values):
    """Лучшее частичное паросочетание перебором: сначала число пар, затем сумма."""
    rows, cols = values.shape
    best = [(0, 0.0)]

    def visit(row, used, count, total):
        if row == rows:
            if (-count, total) < (-best[0][0], best[0][1]):
                best[0] = (count, total)
            return
        visit(row + 1, used, count, total)
        for col in range(cols):
            if col not in used and np.isfinite(values[row, col]):
                visit(row + 1, used | {col}, count + 1, total + values[row, col])

    visit(0, frozenset(), 0, 0.0)
    return best[0]


class CostMatrixTestCase(TestCase):
    def test_identical_boxes_cost_zero(self):
        box = make_box([1.0, 2.0, 0.0])
        self.assertAlmostEqual(build_cost_matrix([box], [box]).values[0, 0], 0.0)

    def test_far_boxes_are_gated(self):
        cfg = TrackingConfig(gate_dist=10.0)
        costs = build_cost_matrix([make_box([0, 0, 0])], [make_box([100, 0, 0])], cfg)
        self.assertTrue(math.isinf(costs.values[0, 0]))

    def test_matches_hand_evaluation(self):
        current = make_box([1.0, 0.0, 0.0], length=4.0, width=2.0, height=2.0)
        previous = make_box([0.0, 0.0, 0.0], length=4.0, width=2.0, height=1.0)
        # пересечение осевых оболочек: 3 x 2 x 1 = 6, меньший объём 8; объёмы 16 и 8
        expected = 0.5 * 1.0 / 5.0 + 0.3 * (1 - 6 / 8) + 0.2 * (16 - 8) / 16
        self.assertAlmostEqual(build_cost_matrix([current], [previous]).values[0, 0], expected, places=12)

    def test_rotated_box_overlap_uses_axis_aligned_hulls(self):
        current = make_box([1.5, 0.0, 0.0], length=2.0, width=2.0, height=1.0, heading=math.pi / 4)
        previous = make_box([0.0, 0.0, 0.0], length=4.0, width=4.0, height=1.0)
        # оболочка повёрнутого квадрата 2√2 x 2√2 x 1 = 8 больше его объёма 4;
        # пересечение оболочек (2 - (1.5 - √2)) x 2√2 x 1, делитель 8
        root = math.sqrt(2)
        overlap = (2.0 - (1.5 - root)) * 2.0 * root / 8.0
        expected = 0.5 * 1.5 / 5.0 + 0.3 * (1 - overlap) + 0.2 * (16 - 4) / 16
        self.assertAlmostEqual(build_cost_matrix([current], [previous]).values[0, 0], expected, places=9)

    def test_negative_cost_rejected(self):
        with self.assertRaises(ValidationError):
            CostMatrix(np.array([[-1.0]]))

    def test_empty_sides(self):
        self.assertEqual(build_cost_matrix([], [make_box([0, 0, 0])]).shape, (0, 1))
        self.assertEqual(solve_assignment(build_cost_matrix([make_box([0, 0, 0])], [])), [])


class AssignmentTestCase(TestCase):
    def test_two_by_two(self):
        matches = solve_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]))
        self.assertEqual(sorted(matches), [(0, 0), (1, 1)])

    def test_single_entry(self):
        self.assertEqual(solve_assignment(np.array([[3.5]])), [(0, 0)])

    def test_gated_pairs_never_matched(self):
        values = np.array([[np.inf, 1.0], [np.inf, 2.0]])
        self.assertEqual(solve_assignment(values), [(0, 1)])

    def test_prefers_more_matches_over_lower_cost(self):
        values = np.array([[0.1, 5.0], [0.2, np.inf]])
        self.assertEqual(sorted(solve_assignment(values)), [(0, 1), (1, 0)])

    def test_optimal_against_brute_force(self):
        rng = np.random.default_rng(0)
        for case in range(100):
            if case < 80:
                rows, cols = 5, 5
            elif case < 95:
                rows, cols = rng.integers(1, 8, size=2)
            else:
                rows, cols = 7, 7
            values = rng.uniform(0, 10, size=(rows, cols))
            values[rng.uniform(size=(rows, cols)) < 0.3] = np.inf
            matches = solve_assignment(values)
            self.assertEqual(len({r for r, _ in matches}), len(matches))
            self.assertEqual(len({c for _, c in matches}), len(matches))
            count, total = brute_force(values)
            self.assertEqual(len(matches), count)
            self.assertAlmostEqual(sum(values[r, c] for r, c in matches), total, places=9)


class StepTracksTestCase(TestCase):
    def detections(self, frame, shift=0.0):
        return [make_box([x + shift, y, 0.0], frame=frame) for x, y in ((0, 0), (20, 0), (0, 20))]

    def test_new_tracks_opened(self):
        registry = step_tracks(TrackRegistry(), self.detections(0), 0)
        self.assertEqual([track.id for track in registry.active], [0, 1, 2])

    def test_same_detections_keep_ids(self):
        registry = step_tracks(TrackRegistry(), self.detections(0), 0)
        step_tracks(registry, self.detections(1), 1)
        self.assertEqual([track.id for track in registry.active], [0, 1, 2])
        self.assertTrue(all(len(track) == 2 for track in registry.active))

    def test_consistent_ids_over_twenty_frames(self):
        frames = [self.detections(t, shift=0.5 * t) for t in range(20)]
        tracks = track_sequence(frames)
        self.assertEqual(len(tracks), 3)
        self.assertTrue(all(track.frames == list(range(20)) for track in tracks))

    def test_retired_ids_not_reused(self):
        cfg = TrackingConfig(max_misses=1)
        registry = step_tracks(TrackRegistry(), [make_box([0, 0, 0], frame=0)], 0, cfg)
        step_tracks(registry, [], 1, cfg)
        step_tracks(registry, [], 2, cfg)
        self.assertEqual(registry.active, [])
        step_tracks(registry, [make_box([0, 0, 0], frame=3)], 3, cfg)
        self.assertEqual([track.id for track in registry.all_tracks()], [0, 1])

    def test_deterministic(self):
        frames = [self.detections(t, shift=0.7 * t) for t in range(6)]
        first = [(track.id, track.frames) for track in track_sequence(frames)]
        second = [(track.id, track.frames) for track in track_sequence(frames)]
        self.assertEqual(first, second)

    def test_frames_strictly_increase(self):
        track = Track(0)
        track.add(make_box([0, 0, 0], frame=2))
        with self.assertRaises(ValidationError):
            track.add(make_box([0, 0, 0], frame=2))


class TrackExportTestCase(TestCase):
    def test_csv_and_archive(self):
        tracks = track_sequence([[make_box([0, 0, 0], frame=0, ids=[1, 2, 3])],
                                 [make_box([1, 0, 0], frame=1, ids=[4, 5])]])
        with tempfile.TemporaryDirectory() as tmp:
            csv_path = os.path.join(tmp, "tracks.csv")
            write_tracks_csv(csv_path, tracks)
            with open(csv_path) as stream:
                rows = list(csv.reader(stream))
            archive = os.path.join(tmp, "tracks.npz")
            save_tracks(archive, tracks)
            again = load_tracks(archive)
        self.assertEqual(rows[0][:2], ["frame", "track_id"])
        self.assertEqual(len(rows), 3)
        self.assertEqual(len(again), 1)
        np.testing.assert_array_equal(again[0].box_at(1).point_ids, [4, 5])
        self.assertEqual(again[0].last_seen, 1)
