"""Synthetic untrimmed feature sequences with planted activity segments.

Each video is an AR(1) Gaussian background per channel (unit stationary sd);
every planted segment adds a class-specific pattern vector scaled by the
signal-to-noise ratio, with linear onset/offset ramps. Segment durations are
log-normal, moment-matched to the configured (mean, sd). Video i depends only
on (seed, i), so per-video generation can run in any order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import (
    CLASS_NAMES,
    DatasetManifest,
    FeatureSequence,
    Segment,
    VideoEntry,
    save_manifest,
    write_feature_file,
)
from .errors import ConfigError, GenerationError, SplitError

_PLACEMENT_RETRIES = 200


@dataclass(frozen=True)
class ClassStats:
    mean_duration_s: float
    sd_duration_s: float
    expected_count_per_video: float


def _default_class_stats() -> dict:
    # Mean durations follow the target domain; the sds are artifact knobs.
    return {
        "time_out": ClassStats(89.8, 30.0, 1.0),
        "stop": ClassStats(62.9, 25.0, 1.0),
    }


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 60
    video_duration_range_s: tuple[float, float] = (600.0, 1200.0)
    feature_fps: float = 0.9375  # stride-32 clips over 30 FPS video
    feature_dim: int = 64
    d_g: int = 48
    class_stats: dict = field(default_factory=_default_class_stats)
    snr: float = 4.0
    boundary_blur_s: float = 5.0
    background_ar_coeff: float = 0.8
    # Pattern amplitude multipliers for the global [0, d_g) and local
    # [d_g, D) channel blocks, so feature-mode ablations stay meaningful.
    global_pattern_scale: float = 1.0
    local_pattern_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.video_duration_range_s
        if not (0 < lo < hi):
            raise ConfigError("video_duration_range_s must satisfy 0 < min < max")
        if self.snr < 0:
            raise ConfigError("snr must be nonnegative")
        if self.boundary_blur_s < 0:
            raise ConfigError("boundary_blur_s must be nonnegative")
        if not (0 <= self.background_ar_coeff < 1):
            raise ConfigError("background_ar_coeff must be in [0, 1)")
        if self.n_videos < 1:
            raise ConfigError("n_videos must be positive")
        if not (0 < self.d_g <= self.feature_dim):
            raise ConfigError("need 0 < d_g <= feature_dim")
        for name, st in self.class_stats.items():
            if name not in CLASS_NAMES:
                raise ConfigError(f"unknown class {name!r}")
            if st.mean_duration_s <= 0 or st.sd_duration_s <= 0:
                raise ConfigError(f"class {name!r} durations must be positive")

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        with open(path) as fh:
            doc = json.load(fh)
        if "class_stats" in doc:
            doc["class_stats"] = {
                name: ClassStats(**st) for name, st in doc["class_stats"].items()
            }
        if "video_duration_range_s" in doc:
            doc["video_duration_range_s"] = tuple(doc["video_duration_range_s"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad synth config: {exc}") from exc

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")


def lognormal_params(mean: float, sd: float) -> tuple[float, float]:
    """(mu, sigma) of the log-normal with the given moments."""
    var_ratio = 1.0 + (sd / mean) ** 2
    sigma = float(np.sqrt(np.log(var_ratio)))
    mu = float(np.log(mean) - 0.5 * np.log(var_ratio))
    return mu, sigma


def class_patterns(cfg: SynthConfig) -> dict:
    """Fixed per-class pattern vectors, a pure function of the seed.

    Each pattern has unit RMS within the global and local channel blocks
    separately, then the per-block amplitude scales are applied.
    """
    rng = np.random.default_rng([cfg.seed, 0xFA77E27])
    patterns = {}
    for cls in CLASS_NAMES:
        vec = rng.standard_normal(cfg.feature_dim)
        for lo, hi, scale in (
            (0, cfg.d_g, cfg.global_pattern_scale),
            (cfg.d_g, cfg.feature_dim, cfg.local_pattern_scale),
        ):
            if hi > lo:
                block = vec[lo:hi]
                rms = np.sqrt(np.mean(block**2))
                vec[lo:hi] = scale * block / max(rms, 1e-12)
        patterns[cls] = vec
    return patterns


def _place_segments(rng, cfg: SynthConfig, duration_s: float) -> list[Segment]:
    wanted = []
    for cls in CLASS_NAMES:
        st = cfg.class_stats.get(cls)
        if st is None:
            continue
        n = int(np.floor(st.expected_count_per_video))
        frac = st.expected_count_per_video - n
        if frac > 0 and rng.random() < frac:
            n += 1
        mu, sigma = lognormal_params(st.mean_duration_s, st.sd_duration_s)
        for _ in range(n):
            wanted.append((cls, float(rng.lognormal(mu, sigma))))
    placed: list[Segment] = []
    for cls, dur in wanted:
        dur = min(dur, duration_s)  # cannot exceed the video
        ok = False
        for _ in range(_PLACEMENT_RETRIES):
            start = float(rng.uniform(0.0, duration_s - dur))
            cand = Segment(cls, start, start + dur)
            if all(
                cand.end_s <= p.start_s or cand.start_s >= p.end_s for p in placed
            ):
                placed.append(cand)
                ok = True
                break
        if not ok:
            raise GenerationError(
                f"could not place a {dur:.1f}s segment without overlap "
                f"in a {duration_s:.1f}s video"
            )
    return sorted(placed, key=lambda s: s.start_s)


def generate_video(cfg: SynthConfig, index: int, patterns=None) -> tuple[FeatureSequence, list[Segment]]:
    """Generate video `index`; depends only on (cfg.seed, index)."""
    if patterns is None:
        patterns = class_patterns(cfg)
    rng = np.random.default_rng([cfg.seed, 1, index])
    lo, hi = cfg.video_duration_range_s
    duration_s = float(rng.uniform(lo, hi))
    n_steps = max(1, int(round(duration_s * cfg.feature_fps)))
    duration_s = max(duration_s, (n_steps - 1) / cfg.feature_fps)

    segments = _place_segments(rng, cfg, duration_s)

    phi = cfg.background_ar_coeff
    innov_sd = np.sqrt(1.0 - phi * phi)
    noise = rng.standard_normal((n_steps, cfg.feature_dim))
    bg = np.empty_like(noise)
    bg[0] = noise[0]  # stationary start: unit sd
    for t in range(1, n_steps):
        bg[t] = phi * bg[t - 1] + innov_sd * noise[t]

    envelope_total = np.zeros((n_steps, cfg.feature_dim))
    times = np.arange(n_steps) / cfg.feature_fps
    for seg in segments:
        env = _ramp_envelope(times, seg.start_s, seg.end_s, cfg.boundary_blur_s)
        envelope_total += np.outer(env, cfg.snr * patterns[seg.label])
    feats = (bg + envelope_total).astype(np.float32)

    seq = FeatureSequence(
        video_id=f"synth_{index:04d}",
        features=feats,
        feature_fps=cfg.feature_fps,
        duration_s=duration_s,
        d_g=cfg.d_g,
    )
    return seq, segments


def _ramp_envelope(times: np.ndarray, start_s: float, end_s: float, blur_s: float) -> np.ndarray:
    """1 inside the segment core, linear ramps of width blur_s at each edge."""
    if blur_s <= 0:
        return ((times >= start_s) & (times <= end_s)).astype(float)
    ramp = min(blur_s, 0.5 * (end_s - start_s))
    up = np.clip((times - start_s) / ramp, 0.0, 1.0)
    down = np.clip((end_s - times) / ramp, 0.0, 1.0)
    return np.minimum(up, down) * ((times >= start_s) & (times <= end_s))


def generate_dataset(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write n_videos feature files plus a manifest (all in split 'train')."""
    os.makedirs(out_dir, exist_ok=True)
    patterns = class_patterns(cfg)
    entries = []
    for i in range(cfg.n_videos):
        seq, segments = generate_video(cfg, i, patterns)
        fname = f"{seq.video_id}.tmf"
        write_feature_file(seq, os.path.join(out_dir, fname))
        entries.append(
            VideoEntry(
                video_id=seq.video_id,
                feature_file=fname,
                duration_s=seq.duration_s,
                split="train",
                segments=tuple(segments),
            )
        )
    manifest = DatasetManifest(tuple(entries))
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def make_split(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Assign train/test at the video level; round-to-nearest, ties up."""
    if not (0 < train_fraction < 1):
        raise SplitError(f"train_fraction {train_fraction} outside (0, 1)")
    n = len(manifest.videos)
    if n < 2:
        raise SplitError("need at least 2 videos to split")
    n_train = int(np.floor(n * train_fraction + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    rng = np.random.default_rng([seed, 2])
    order = rng.permutation(n)
    train_ids = {manifest.videos[i].video_id for i in order[:n_train]}
    videos = tuple(
        VideoEntry(
            v.video_id,
            v.feature_file,
            v.duration_s,
            "train" if v.video_id in train_ids else "test",
            v.segments,
        )
        for v in manifest.videos
    )
    return DatasetManifest(videos)
