"""On-disk dataset format: a JSON-lines manifest plus a flat little-endian
float32 sample blob.

The first manifest line is a header record; every following line describes
one scene with its geometry, conditions, label and the float offsets of
its two frames in the blob.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .room import RoomSpec, Scene

DATASET_FORMAT_VERSION = 1


def _scene_record(index: int, scene: Scene, offset: int, frame_length: int) -> dict:
    return {
        "index": index,
        "room_dimensions": list(scene.room.dimensions),
        "t60_s": scene.room.t60,
        "speed_of_sound": scene.room.speed_of_sound,
        "mic1": list(scene.mic1),
        "mic2": list(scene.mic2),
        "source": list(scene.source),
        "snr_db": "inf" if math.isinf(scene.snr_db) else scene.snr_db,
        "seed": scene.seed,
        "sample_rate": scene.sample_rate,
        "true_delay_samples": scene.true_delay_samples,
        "frame_length": frame_length,
        "x1_offset_floats": offset,
        "x2_offset_floats": offset + frame_length,
    }


def _record_scene(record: dict) -> Scene:
    room = RoomSpec(
        tuple(record["room_dimensions"]), record["t60_s"],
        record["speed_of_sound"],
    )
    snr = record["snr_db"]
    return Scene(
        room=room,
        mic1=tuple(record["mic1"]),
        mic2=tuple(record["mic2"]),
        source=tuple(record["source"]),
        snr_db=math.inf if snr == "inf" else float(snr),
        seed=record["seed"],
        sample_rate=record["sample_rate"],
        true_delay_samples=record["true_delay_samples"],
    )


class DatasetWriter:
    """Streams (scene, x1, x2) records to <prefix>.jsonl and <prefix>.f32."""

    def __init__(self, path_prefix, frame_length: int, sample_rate: float,
                 meta: dict | None = None):
        prefix = Path(path_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        self.frame_length = frame_length
        self._manifest = open(prefix.with_suffix(".jsonl"), "w")
        self._blob = open(prefix.with_suffix(".f32"), "wb")
        self._offset = 0
        self._index = 0
        header = {
            "kind": "header",
            "format": "tdoakit-dataset",
            "version": DATASET_FORMAT_VERSION,
            "frame_length": frame_length,
            "sample_rate": sample_rate,
        }
        if meta:
            header["meta"] = meta
        self._manifest.write(json.dumps(header) + "\n")

    def add(self, scene: Scene, x1: np.ndarray, x2: np.ndarray):
        if x1.shape != (self.frame_length,) or x2.shape != (self.frame_length,):
            raise DataError(
                f"frames must have shape ({self.frame_length},), "
                f"got {x1.shape} and {x2.shape}"
            )
        record = _scene_record(self._index, scene, self._offset, self.frame_length)
        self._manifest.write(json.dumps(record) + "\n")
        self._blob.write(np.asarray(x1, dtype="<f4").tobytes())
        self._blob.write(np.asarray(x2, dtype="<f4").tobytes())
        self._offset += 2 * self.frame_length
        self._index += 1

    def close(self):
        self._manifest.close()
        self._blob.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class DatasetReader:
    """Random access over a written dataset."""

    def __init__(self, path_prefix):
        prefix = Path(path_prefix)
        lines = prefix.with_suffix(".jsonl").read_text().splitlines()
        if not lines:
            raise DataError(f"empty manifest at {prefix}")
        header = json.loads(lines[0])
        if header.get("format") != "tdoakit-dataset":
            raise ConfigError(f"not a tdoakit dataset manifest: {prefix}")
        if header.get("version") != DATASET_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported dataset version {header.get('version')}"
            )
        self.header = header
        self.frame_length = int(header["frame_length"])
        self.sample_rate = float(header["sample_rate"])
        self.records = [json.loads(line) for line in lines[1:]]
        self._blob = np.memmap(prefix.with_suffix(".f32"), dtype="<f4", mode="r")
        expected = 2 * self.frame_length * len(self.records)
        if self._blob.size != expected:
            raise DataError(
                f"blob has {self._blob.size} floats, manifest implies {expected}"
            )

    def __len__(self):
        return len(self.records)

    def scene(self, index: int) -> Scene:
        return _record_scene(self.records[index])

    def frames(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        record = self.records[index]
        n = self.frame_length
        start = record["x1_offset_floats"]
        x1 = np.array(self._blob[start:start + n], dtype=np.float64)
        x2 = np.array(self._blob[start + n:start + 2 * n], dtype=np.float64)
        return x1, x2

    def labels(self) -> np.ndarray:
        return np.array([r["true_delay_samples"] for r in self.records],
                        dtype=np.int64)
