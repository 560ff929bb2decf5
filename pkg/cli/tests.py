import json
import os
import shutil
import tempfile
from io import StringIO
from unittest import TestCase, mock

import numpy as np
from django.conf import settings
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase

from cli.models import Workspace
from cli.services import (
    apply_override,
    cascade_config,
    config_hash,
    config_reference,
    load_config,
    train_config,
    validate_config,
)
from cloud.exceptions import ConfigurationError, MissingStageError
from cloud.services import read_kitti_bin, read_kitti_label

# Маленький бюджет, чтобы весь пайплайн укладывался в секунды
SMALL = [
    "learn.epochs=1",
    "learn.samples=2",
    "learn.batch_size=2",
    "correspond.intervals=[3]",
    "cascade.epochs=1",
    "cascade.samples=2",
    "cascade.batch_size=2",
]


def run(command, workdir, *args, **options):
    options.setdefault("overrides", list(SMALL))
    stdout, stderr = StringIO(), StringIO()
    call_command(command, *args, workdir=workdir, stdout=stdout, stderr=stderr, **options)
    return stdout.getvalue()


class ConfigTestCase(TestCase):
    def test_defaults_fill_missing_sections(self):
        config = validate_config({})
        self.assertEqual(config["learn"]["mode"], "st+dloss")
        self.assertEqual(config["preprocess"]["ground"]["iterations"], 100)
        self.assertEqual(config["correspond"]["intervals"], [5, 10, 15, 20, 25, 30])
        self.assertEqual(config["seed"], settings.PIPELINE_SEED)

    def test_unknown_keys_rejected(self):
        with self.assertRaises(ConfigurationError):
            validate_config({"leran": {}})
        with self.assertRaises(ConfigurationError):
            validate_config({"preprocess": {"sor": {"kk": 3}}})

    def test_invalid_values_rejected(self):
        with self.assertRaises(ConfigurationError):
            validate_config({"learn": {"mode": "supervised"}})
        with self.assertRaises(ConfigurationError):
            validate_config({"cascade": {"car_length": [6.0, 2.5]}})

    def test_override_parsing(self):
        data = {}
        apply_override(data, "learn.epochs=3")
        apply_override(data, "correspond.intervals=[2, 4]")
        apply_override(data, "learn.augment.flip=false")
        apply_override(data, "seed=7")
        self.assertEqual(data, {
            "learn": {"epochs": 3, "augment": {"flip": False}},
            "correspond": {"intervals": [2, 4]},
            "seed": 7,
        })
        with self.assertRaises(ConfigurationError):
            apply_override(data, "learn.epochs")
        with self.assertRaises(ConfigurationError):
            apply_override(data, "seed.value=1")

    def test_example_file_is_valid(self):
        config = load_config(os.path.join(settings.BASE_DIR, "pipeline.example.yaml"))
        self.assertEqual(config["learn"]["k"], 4)

    def test_missing_explicit_file(self):
        with self.assertRaises(ConfigurationError):
            load_config("/nonexistent/pipeline.yaml")

    def test_hash_depends_only_on_chosen_sections(self):
        config = validate_config({})
        other = validate_config({"learn": {"epochs": 3}})
        self.assertEqual(config_hash(config, ("dynamics",)), config_hash(other, ("dynamics",)))
        self.assertNotEqual(config_hash(config, ("learn",)), config_hash(other, ("learn",)))
        self.assertNotEqual(config_hash(config, ("learn",), "a"), config_hash(config, ("learn",), "b"))

    def test_dataclass_configs(self):
        config = validate_config({"seed": 3, "threads": 2, "dynamics": {"epsilon": 0.4}})
        cfg = train_config(config)
        self.assertEqual((cfg.seed, cfg.threads, cfg.k), (3, 2, 4))
        cascade = cascade_config(config)
        self.assertEqual(cascade.epsilon, 0.4)
        self.assertEqual(cascade.learn.k, 2)
        self.assertEqual(cascade.learn.mode, "st")
        self.assertEqual(cascade.car_length, (2.5, 6.0))

    def test_reference_lists_every_parameter(self):
        document = config_reference()
        for key in ("`seed`", "`learn.mode`", "`preprocess.ground.iterations`", "`cascade.variant`"):
            self.assertIn(key, document)
        rows = [line for line in document.splitlines() if line.startswith("| `")]
        self.assertTrue(all(not line.endswith("|  |") for line in rows))


class WorkspaceTestCase(TestCase):
    def test_require_names_missing_stage(self):
        with tempfile.TemporaryDirectory() as tmp:
            workspace = Workspace(tmp)
            with self.assertRaises(MissingStageError) as caught:
                workspace.require("align", workspace.poses)
            self.assertEqual(caught.exception.stage, "align")
            self.assertIn("python manage.py align", str(caught.exception))
            os.makedirs(workspace.corr)
            with self.assertRaises(MissingStageError):
                workspace.require("autolabel", workspace.corr)

    def test_stamps(self):
        with tempfile.TemporaryDirectory() as tmp:
            workspace = Workspace(tmp)
            self.assertFalse(workspace.is_fresh("align", "abc"))
            workspace.write_stamp("align", "abc")
            self.assertTrue(workspace.is_fresh("align", "abc"))
            self.assertFalse(workspace.is_fresh("align", "abd"))
            self.assertEqual(workspace.upstream_hash("align"), "abc")
            self.assertEqual(workspace.upstream_hash("synth"), "")


class StageErrorTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_missing_upstream_stage(self):
        with self.assertRaises(CommandError) as caught:
            run("align", self.tmp)
        self.assertEqual(caught.exception.returncode, 2)
        with open(os.path.join(self.tmp, "error.json")) as stream:
            record = json.load(stream)
        self.assertEqual(record["stage"], "align")
        self.assertEqual(record["code"], "missing_stage")
        self.assertEqual(record["missing_stage"], "synth")

    def test_segment_without_checkpoint(self):
        run("synth", self.tmp, frames=2)
        with self.assertRaises(CommandError):
            run("segment", self.tmp)
        with open(os.path.join(self.tmp, "error.json")) as stream:
            self.assertEqual(json.load(stream)["missing_stage"], "train")

    def test_bad_configuration(self):
        with self.assertRaises(CommandError):
            run("synth", self.tmp, overrides=["learn.bogus=1"])
        with open(os.path.join(self.tmp, "error.json")) as stream:
            self.assertEqual(json.load(stream)["code"], "configuration")

    def test_eval_of_identical_labels(self):
        run("synth", self.tmp, frames=2)
        shutil.copytree(os.path.join(self.tmp, "labels"), os.path.join(self.tmp, "pred"))
        run("eval", self.tmp)
        with open(os.path.join(self.tmp, "report.json")) as stream:
            report = json.load(stream)
        self.assertAlmostEqual(report["miou"], 1.0)
        self.assertEqual(report["stage"], "eval")
        self.assertFalse(os.path.exists(os.path.join(self.tmp, "error.json")))

    def test_baseline_never_reads_correspondences(self):
        run("synth", self.tmp, frames=3)
        with mock.patch("cli.services.read_correspondences") as reader:
            run("train", self.tmp, mode="baseline")
        reader.assert_not_called()
        self.assertTrue(os.path.exists(os.path.join(self.tmp, "ckpt", "model.ckpt")))

    def test_same_seed_same_scene(self):
        first, second = os.path.join(self.tmp, "a"), os.path.join(self.tmp, "b")
        run("synth", first, frames=2, seed=4)
        run("synth", second, frames=2, seed=4)
        for name in ("000000.bin", "000001.bin"):
            np.testing.assert_array_equal(
                read_kitti_bin(os.path.join(first, "clouds", name)).xyz,
                read_kitti_bin(os.path.join(second, "clouds", name)).xyz,
            )


class PipelineCommandsTestCase(SimpleTestCase):
    """synth -> align -> autolabel -> train -> segment -> eval на коротком демо."""

    frames = 8

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.mkdtemp()
        cls.workspace = Workspace(cls.tmp)
        run("synth", cls.tmp, frames=cls.frames)
        run("align", cls.tmp)
        run("autolabel", cls.tmp)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)
        super().tearDownClass()

    def test_layout_contract(self):
        workspace = self.workspace
        for path in (workspace.poses, workspace.boxes, workspace.tracks):
            self.assertTrue(path.is_file(), path)
        self.assertEqual(len(workspace.frame_names()), self.frames)
        self.assertEqual(len(list(workspace.scores.glob("*.f32"))), self.frames)
        self.assertEqual(len(list(workspace.corr.glob("*.corr"))), self.frames - 3)
        cloud = read_kitti_bin(workspace.clouds / "000004.bin")
        self.assertEqual(os.path.getsize(workspace.scores / "000004.f32"), 4 * len(cloud))
        with open(workspace.poses) as stream:
            self.assertEqual(len(stream.read().split()), 12 * self.frames)

    def test_rerun_with_same_config_is_skipped(self):
        before = os.path.getmtime(self.workspace.poses)
        output = run("align", self.tmp)
        self.assertIn("пропущена", output)
        self.assertEqual(os.path.getmtime(self.workspace.poses), before)

    def test_train_segment_eval(self):
        run("train", self.tmp, mode="st+dloss")
        run("segment", self.tmp, ply=True)
        run("eval", self.tmp)
        pred = read_kitti_label(self.workspace.pred / "000000.label")
        truth = read_kitti_label(self.workspace.labels / "000000.label")
        self.assertEqual(len(pred), len(truth))
        self.assertTrue(((pred.semantic >= 0) & (pred.semantic < 4)).all())
        self.assertTrue((self.workspace.pred / "000000.ply").exists())
        with open(self.workspace.report) as stream:
            report = json.load(stream)
        self.assertEqual(report["mode"], "st+dloss")
        self.assertGreaterEqual(report["miou"], 0.0)
        self.assertLessEqual(report["miou"], 1.0)
        self.assertEqual(set(report["mapping"]), {"0", "1", "2", "3"})
        with open(self.workspace.ckpt / "train.jsonl") as stream:
            self.assertEqual(len(stream.readlines()), 1)

    def test_single_shot_cascade(self):
        run("cascade", self.tmp, variant="single-shot")
        with open(self.workspace.cascade_report) as stream:
            report = json.load(stream)
        self.assertEqual(report["variant"], "single-shot")
        self.assertIn("background", report["cascade"]["per_class_iou"])
        self.assertEqual(len(list((self.workspace.root / "pred_cascade").glob("*.label"))), self.frames)
