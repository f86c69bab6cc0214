"""Core data types, the binary feature-file codec, and dataset manifests.

Feature files are binary, little-endian:
    magic "TMF1" | u32 version=1 | u32 T | u32 D | u32 d_g |
    f32 feature_fps | f32 duration_s | T*D f32 row-major payload
Manifests are JSON documents listing videos, their splits, and labeled
segments. Times are always seconds; conversion to the feature grid happens
at assignment/decoding time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, IoError, ManifestError

MAGIC = b"TMF1"
VERSION = 1
HEADER = struct.Struct("<4sIIIIff")

CLASS_NAMES = ("time_out", "stop")


@dataclass(frozen=True)
class FeatureSequence:
    """Per-clip video features for one untrimmed video: a T x D matrix."""

    video_id: str
    features: np.ndarray  # (T, D) float32
    feature_fps: float
    duration_s: float
    d_g: int  # split point: columns [0, d_g) are global-context channels

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float32)
        object.__setattr__(self, "features", f)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise DataError(f"features must be a non-empty 2D matrix, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise DataError(f"non-finite feature value in video {self.video_id!r}")
        if self.feature_fps <= 0:
            raise DataError("feature_fps must be positive")
        if not (0 <= self.d_g <= f.shape[1]):
            raise DataError(f"d_g={self.d_g} outside [0, D={f.shape[1]}]")
        t = f.shape[0]
        if self.duration_s < (t - 1) / self.feature_fps:
            raise DataError(
                f"duration {self.duration_s}s too short for {t} features at {self.feature_fps}/s"
            )

    @property
    def num_steps(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Segment:
    """Ground-truth activity interval in seconds."""

    label: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if self.label not in CLASS_NAMES:
            raise ManifestError(f"unknown label {self.label!r}")
        if not (0 <= self.start_s < self.end_s):
            raise ManifestError(f"bad segment bounds [{self.start_s}, {self.end_s}]")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class Proposal:
    """Scored detection interval for one video."""

    video_id: str
    label: str
    start_s: float
    end_s: float
    score: float

    def __post_init__(self):
        if self.start_s >= self.end_s:
            raise DataError(f"bad proposal bounds [{self.start_s}, {self.end_s}]")
        if not (0.0 <= self.score <= 1.0):
            raise DataError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    feature_file: str
    duration_s: float
    split: str  # "train" | "test"
    segments: tuple[Segment, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class DatasetManifest:
    videos: tuple[VideoEntry, ...]

    def __post_init__(self):
        seen = set()
        for v in self.videos:
            if v.video_id in seen:
                raise ManifestError(f"duplicate video_id {v.video_id!r}")
            seen.add(v.video_id)
            if v.split not in ("train", "test"):
                raise ManifestError(f"bad split {v.split!r} for {v.video_id!r}")
            for s in v.segments:
                if s.end_s > v.duration_s:
                    raise ManifestError(
                        f"segment [{s.start_s}, {s.end_s}] outside video "
                        f"{v.video_id!r} of {v.duration_s}s"
                    )

    def subset(self, split: str) -> tuple[VideoEntry, ...]:
        return tuple(v for v in self.videos if v.split == split)

    def counts(self) -> dict:
        """Per-split video and per-class segment counts, plus totals."""
        out = {}
        for split in ("train", "test", "total"):
            vids = self.videos if split == "total" else self.subset(split)
            row = {"videos": len(vids)}
            for cls in CLASS_NAMES:
                row[cls] = sum(1 for v in vids for s in v.segments if s.label == cls)
            out[split] = row
        return out


def write_feature_file(seq: FeatureSequence, path) -> None:
    t, d = seq.features.shape
    header = HEADER.pack(MAGIC, VERSION, t, d, seq.d_g, seq.feature_fps, seq.duration_s)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(seq.features, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_feature_file(path) -> FeatureSequence:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, t, d, d_g, fps, duration = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = blob[HEADER.size:]
    expected = t * d * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected} for T={t} D={d}"
        )
    feats = np.frombuffer(payload, dtype="<f4").reshape(t, d)
    if not np.all(np.isfinite(feats)):
        raise DataError(f"{path}: non-finite feature value")
    video_id = str(path).rsplit("/", 1)[-1]
    if video_id.endswith(".tmf"):
        video_id = video_id[:-4]
    try:
        return FeatureSequence(video_id, feats, float(fps), float(duration), int(d_g))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "videos" not in doc:
        raise ManifestError(f"{path}: expected object with a 'videos' list")
    videos = []
    for v in doc["videos"]:
        try:
            segments = tuple(
                Segment(s["label"], float(s["start_s"]), float(s["end_s"]))
                for s in v.get("segments", [])
            )
            videos.append(
                VideoEntry(
                    video_id=str(v["id"]),
                    feature_file=str(v["feature_file"]),
                    duration_s=float(v["duration_s"]),
                    split=str(v["split"]),
                    segments=segments,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: malformed video entry ({exc})") from exc
    return DatasetManifest(tuple(videos))


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "videos": [
            {
                "id": v.video_id,
                "feature_file": v.feature_file,
                "duration_s": v.duration_s,
                "split": v.split,
                "segments": [
                    {"label": s.label, "start_s": s.start_s, "end_s": s.end_s}
                    for s in v.segments
                ],
            }
            for v in manifest.videos
        ]
    }
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def seconds_to_feature_index(t_s: float, feature_fps: float) -> float:
    return t_s * feature_fps


def feature_index_to_seconds(index: float, feature_fps: float) -> float:
    return index / feature_fps


def proposals_to_json(proposals, path=None) -> str:
    """Detection-output JSON: array of proposal objects, descending score."""
    ordered = sorted(proposals, key=lambda p: (-p.score, p.start_s, p.end_s, p.video_id))
    doc = [
        {
            "video_id": p.video_id,
            "label": p.label,
            "start_s": p.start_s,
            "end_s": p.end_s,
            "score": p.score,
        }
        for p in ordered
    ]
    text = json.dumps(doc, indent=2) + "\n"
    if path is not None:
        try:
            with open(path, "w") as fh:
                fh.write(text)
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc
    return text
