from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from cloud.exceptions import MissingStageError


@dataclass(frozen=True)
class Workspace:
    """Рабочий каталог стадий.

    clouds/ и labels/: входные кадры и истинная разметка (synth или данные пользователя),
    poses.txt: align, scores/, boxes.csv, tracks.csv, corr/: autolabel, ckpt/: train,
    pred/: segment, report.json: eval. Служебные кэши лежат в .cache/, отметки стадий в .stamps/.
    """

    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def clouds(self):
        return self.root / "clouds"

    @property
    def labels(self):
        return self.root / "labels"

    @property
    def poses(self):
        return self.root / "poses.txt"

    @property
    def scores(self):
        return self.root / "scores"

    @property
    def boxes(self):
        return self.root / "boxes.csv"

    @property
    def tracks(self):
        return self.root / "tracks.csv"

    @property
    def corr(self):
        return self.root / "corr"

    @property
    def ckpt(self):
        return self.root / "ckpt"

    @property
    def checkpoint(self):
        return self.ckpt / "model.ckpt"

    @property
    def pred(self):
        return self.root / "pred"

    @property
    def report(self):
        return self.root / "report.json"

    @property
    def cascade_report(self):
        return self.root / "cascade.json"

    @property
    def benchmark_report(self):
        return self.root / "benchmark.json"

    @property
    def error(self):
        return self.root / "error.json"

    @property
    def cache(self):
        return self.root / ".cache"

    @property
    def stamps(self):
        return self.root / ".stamps"

    def frame_names(self):
        """Имена кадров clouds/*.bin по порядку."""
        if not self.clouds.is_dir():
            return []
        return sorted(path.stem for path in self.clouds.glob("*.bin"))

    def require(self, stage, path):
        path = Path(path)
        if not path.exists() or (path.is_dir() and not any(path.iterdir())):
            raise MissingStageError(stage, path)
        return path

    def stamp_of(self, stage):
        path = self.stamps / f"{stage}.json"
        if not path.exists():
            return None
        with open(path) as stream:
            return json.load(stream)

    def write_stamp(self, stage, digest, **extra):
        os.makedirs(self.stamps, exist_ok=True)
        with open(self.stamps / f"{stage}.json", "w") as stream:
            json.dump({"stage": stage, "hash": digest, **extra}, stream, indent=2)

    def is_fresh(self, stage, digest):
        stamp = self.stamp_of(stage)
        return stamp is not None and stamp.get("hash") == digest

    def upstream_hash(self, stage):
        stamp = self.stamp_of(stage)
        return stamp["hash"] if stamp else ""

    def write_error(self, record):
        os.makedirs(self.root, exist_ok=True)
        with open(self.error, "w") as stream:
            json.dump(record, stream, ensure_ascii=False, indent=2)

    def clear_error(self):
        if self.error.exists():
            self.error.unlink()
