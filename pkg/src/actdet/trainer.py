"""Training loop (AdamW with warmup + cosine decay, gradient clipping,
checkpointing), split evaluation, the ablation harness, and the forward
throughput benchmark."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .assign import AssignmentConfig, assign_targets
from .data import (
    DatasetManifest,
    FeatureSequence,
    read_feature_file,
)
from .decode import DecodeConfig, decode_proposals, soft_nms
from .errors import ConfigError, TrainingError
from .losses import total_loss
from .metrics import DEFAULT_TIOU_THRESHOLDS, ap_table
from .network import (
    ModelConfig,
    ModelParams,
    Network,
    load_checkpoint,
    pyramid_geometry,
    save_checkpoint,
)

FEATURE_MODES = ("full", "global_only", "local_only")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 2
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    grad_clip_norm: float = 1.0
    seed: int = 0
    feature_mode: str = "full"
    pyramid_mode: str = "max_plus_avg"
    eval_interval: int = 1  # epochs between validation passes
    focal_gamma: float = 2.0
    center_radius: float = 1.5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs/batch_size/learning_rate out of range")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature_mode {self.feature_mode!r}")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


def slice_features(seq: FeatureSequence, mode: str) -> np.ndarray:
    if mode == "full":
        return seq.features
    if mode == "global_only":
        return seq.features[:, :seq.d_g]
    if mode == "local_only":
        return seq.features[:, seq.d_g:]
    raise ConfigError(f"unknown feature_mode {mode!r}")


def load_split(manifest: DatasetManifest, data_dir, split: str):
    """[(FeatureSequence, segments)] for one split, manifest order."""
    out = []
    for v in manifest.subset(split):
        path = v.feature_file
        if not os.path.isabs(path):
            path = os.path.join(data_dir, path)
        seq = read_feature_file(path)
        out.append((seq, list(v.segments)))
    return out


class AdamW:
    """Decoupled weight decay Adam; decay applies to conv weights only."""

    def __init__(self, params: ModelParams, lr, weight_decay,
                 betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: ModelParams, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.b1**self.step_count
        bc2 = 1.0 - self.b2**self.step_count
        for name in sorted(params.tensors):
            g = params.grads[name]
            p = params.tensors[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name.endswith(".w"):
                update = update + self.weight_decay * p
            p -= lr * update


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    total = np.sqrt(sum(float((g * g).sum()) for g in params.grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in params.grads.values():
            g *= scale
    return total


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    if warmup_steps > 0 and step < warmup_steps:
        return cfg.learning_rate * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * progress))


def detect_video(network: Network, params: ModelParams, seq: FeatureSequence,
                 features: np.ndarray, decode_cfg: DecodeConfig):
    _, outputs, _ = network.forward(params, features)
    raw = decode_proposals(outputs, seq.video_id, seq.feature_fps,
                           seq.duration_s, decode_cfg)
    return soft_nms(raw, decode_cfg)


def evaluate_split(network, params, videos, feature_mode,
                   decode_cfg=None, thresholds=DEFAULT_TIOU_THRESHOLDS):
    """AP table over a list of (FeatureSequence, segments) pairs."""
    decode_cfg = decode_cfg or DecodeConfig()
    proposals = []
    ground_truth = {}
    for seq, segments in videos:
        ground_truth[seq.video_id] = segments
        feats = slice_features(seq, feature_mode)
        proposals.extend(detect_video(network, params, seq, feats, decode_cfg))
    return ap_table(proposals, ground_truth, thresholds), proposals


def score_clips(network: Network, params: ModelParams, seq: FeatureSequence,
                features: np.ndarray, segments, clip_len_s: float = 30.0):
    """Per-clip class scores and labels for the fixed-length clip mode.

    Each clip's score for a class is the maximum predicted probability over
    all pyramid moments whose time falls inside the clip.
    """
    from .data import CLASS_NAMES
    from .metrics import clip_split
    from .network import sigmoid

    clips = clip_split(seq, segments, clip_len_s)
    _, outputs, _ = network.forward(params, features)
    times, probs = [], []
    for l, logits in enumerate(outputs.logits):
        stride = outputs.strides[l]
        n = logits.shape[1]
        times.append(np.arange(n) * stride / seq.feature_fps)
        probs.append(sigmoid(logits))
    times = np.concatenate(times)
    probs = np.concatenate(probs, axis=1)
    scored = []
    for k, (_, labels) in enumerate(clips):
        t0, t1 = k * clip_len_s, (k + 1) * clip_len_s
        inside = (times >= t0) & (times < t1)
        scores = {
            cls: float(probs[c, inside].max()) if inside.any() else 0.0
            for c, cls in enumerate(CLASS_NAMES[:probs.shape[0]])
        }
        scored.append((scores, labels))
    return scored


def train(manifest: DatasetManifest, data_dir, model_cfg: ModelConfig,
          cfg: TrainConfig, out_dir, decode_cfg=None, log=print):
    """Full optimization run; writes metrics.csv, best.ckpt and final.ckpt."""
    os.makedirs(out_dir, exist_ok=True)
    decode_cfg = decode_cfg or DecodeConfig()
    train_videos = load_split(manifest, data_dir, "train")
    if not train_videos:
        raise TrainingError("manifest has an empty train split")
    val_videos = load_split(manifest, data_dir, "test")

    if model_cfg.pyramid_mode != cfg.pyramid_mode:
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "pyramid_mode": cfg.pyramid_mode})
    network = Network(model_cfg)
    params = network.init_params(cfg.seed)
    assign_cfg = AssignmentConfig(n_levels=model_cfg.n_pyramid_levels,
                                  center_radius=cfg.center_radius)
    optimizer = AdamW(params, cfg.learning_rate, cfg.weight_decay)
    meta = {"model": model_cfg.to_dict(), "feature_mode": cfg.feature_mode}

    # pre-slice features and precompute per-video targets (geometry is static)
    prepared = []
    for seq, segments in train_videos:
        feats = slice_features(seq, cfg.feature_mode).astype(np.float64)
        _, valids, strides = pyramid_geometry(seq.num_steps, model_cfg.n_pyramid_levels)
        targets = assign_targets(segments, valids, strides, seq.feature_fps, assign_cfg)
        prepared.append((seq, feats, targets))

    steps_per_epoch = max((len(prepared) + cfg.batch_size - 1) // cfg.batch_size, 1)
    rng = np.random.default_rng([cfg.seed, 4])
    metrics_path = os.path.join(out_dir, "metrics.csv")
    best = {"mean_avg": -1.0, "epoch": -1}
    step = 0

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "total_loss", "cls_pos", "cls_neg",
                         "reg", "lr", "grad_norm"])
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(prepared))
            for b in range(steps_per_epoch):
                batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                if len(batch) == 0:
                    continue
                params.zero_grads()
                totals = np.zeros(4)
                for vi in batch:
                    seq, feats, targets = prepared[vi]
                    _, outputs, fwd_cache = network.forward(params, feats)
                    loss, comp, d_logits, d_offsets = total_loss(
                        outputs, targets, gamma=cfg.focal_gamma)
                    if not np.isfinite(loss):
                        raise TrainingError(
                            f"non-finite loss at step {step} "
                            f"(video {seq.video_id!r}, components: "
                            f"cls_pos={comp['cls_pos']:.4g} "
                            f"cls_neg={comp['cls_neg']:.4g} reg={comp['reg']:.4g})"
                        )
                    scale = 1.0 / len(batch)
                    d_logits = [d * scale for d in d_logits]
                    d_offsets = [d * scale for d in d_offsets]
                    network.backward(params, fwd_cache, d_logits, d_offsets)
                    totals += scale * np.array(
                        [loss, comp["cls_pos"], comp["cls_neg"], comp["reg"]])
                grad_norm = clip_gradients(params, cfg.grad_clip_norm)
                lr = lr_at(step, steps_per_epoch, cfg)
                optimizer.step(params, lr)
                writer.writerow([step, epoch, f"{totals[0]:.6f}", f"{totals[1]:.6f}",
                                 f"{totals[2]:.6f}", f"{totals[3]:.6f}",
                                 f"{lr:.8f}", f"{grad_norm:.6f}"])
                step += 1
            if val_videos and (epoch + 1) % cfg.eval_interval == 0:
                table, _ = evaluate_split(network, params, val_videos,
                                          cfg.feature_mode, decode_cfg)
                if table["mean_avg"] > best["mean_avg"]:
                    best = {"mean_avg": table["mean_avg"], "epoch": epoch}
                    save_checkpoint(params, {**meta, **best},
                                    os.path.join(out_dir, "best.ckpt"))
                log(f"epoch {epoch + 1}/{cfg.epochs} loss={totals[0]:.4f} "
                    f"val mean AP={table['mean_avg']:.4f}")

    save_checkpoint(params, {**meta, "epoch": cfg.epochs - 1},
                    os.path.join(out_dir, "final.ckpt"))
    if best["epoch"] < 0:
        save_checkpoint(params, {**meta, **best}, os.path.join(out_dir, "best.ckpt"))
    return {"metrics_csv": metrics_path,
            "best_ckpt": os.path.join(out_dir, "best.ckpt"),
            "final_ckpt": os.path.join(out_dir, "final.ckpt"),
            "best": best}


def run_ablation(manifest: DatasetManifest, data_dir, grid, model_base: dict,
                 cfg: TrainConfig, out_dir, decode_cfg=None, log=print):
    """Train one model per (feature_mode, pyramid_mode) cell and tabulate AP.

    Returns a list of row dicts; also writes ablation.csv under out_dir.
    """
    os.makedirs(out_dir, exist_ok=True)
    probe = load_split(manifest, data_dir, "test") or load_split(manifest, data_dir, "train")
    full_dim = probe[0][0].dim
    d_g = probe[0][0].d_g
    rows = []
    for feature_mode, pyramid_mode in grid:
        input_dim = {"full": full_dim, "global_only": d_g,
                     "local_only": full_dim - d_g}[feature_mode]
        model_cfg = ModelConfig(input_dim=input_dim, pyramid_mode=pyramid_mode,
                                **model_base)
        cell_cfg = TrainConfig(**{**cfg.__dict__, "feature_mode": feature_mode,
                                  "pyramid_mode": pyramid_mode})
        cell_dir = os.path.join(out_dir, f"{feature_mode}__{pyramid_mode}")
        result = train(manifest, data_dir, model_cfg, cell_cfg, cell_dir,
                       decode_cfg, log=log)
        params, _ = load_checkpoint(result["best_ckpt"])
        table, _ = evaluate_split(Network(model_cfg), params,
                                  load_split(manifest, data_dir, "test"),
                                  feature_mode, decode_cfg)
        rows.append({"feature_mode": feature_mode, "pyramid_mode": pyramid_mode,
                     "table": table})
    write_ablation_csv(rows, os.path.join(out_dir, "ablation.csv"))
    return rows


def write_ablation_csv(rows, path, thresholds=DEFAULT_TIOU_THRESHOLDS) -> None:
    from .data import CLASS_NAMES

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["feature_mode", "pyramid_mode"]
        for cls in CLASS_NAMES:
            header += [f"{cls}@{t}" for t in thresholds] + [f"{cls}@avg"]
        header.append("mean_avg")
        writer.writerow(header)
        for row in rows:
            t = row["table"]
            cells = [row["feature_mode"], row["pyramid_mode"]]
            for cls in CLASS_NAMES:
                cells += [f"{t[cls][x]:.4f}" for x in list(thresholds) + ["avg"]]
            cells.append(f"{t['mean_avg']:.4f}")
            writer.writerow(cells)


def bench_throughput(model_cfg: ModelConfig, n_steps: int, repetitions: int = 5,
                     feature_fps: float = 0.9375, decode_cfg=None, seed: int = 0) -> dict:
    """Wall-clock forward+decode over random inputs.

    Reports per-repetition timings plus median/p95 summaries of feature
    frames per second and equivalent processed video seconds per wall second.
    """
    decode_cfg = decode_cfg or DecodeConfig()
    network = Network(model_cfg)
    params = network.init_params(seed)
    rng = np.random.default_rng([seed, 5])
    feats = rng.standard_normal((n_steps, model_cfg.input_dim))
    duration_s = n_steps / feature_fps
    seq = FeatureSequence("bench", feats.astype(np.float32), feature_fps,
                          duration_s, model_cfg.input_dim)
    walls = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        detect_video(network, params, seq, feats, decode_cfg)
        walls.append(time.perf_counter() - t0)
    walls = np.array(walls)
    return {
        "n_steps": n_steps,
        "repetitions": repetitions,
        "wall_s": walls.tolist(),
        "wall_median_s": float(np.median(walls)),
        "wall_p95_s": float(np.percentile(walls, 95)),
        "features_per_s_median": float(n_steps / np.median(walls)),
        "features_per_s_p95": float(n_steps / np.percentile(walls, 95)),
        "video_speedup_median": float(duration_s / np.median(walls)),
        "video_speedup_p95": float(duration_s / np.percentile(walls, 95)),
    }
