"""Command-line entry point.

Subcommands: synth, train, eval, detect, clip-eval, bench.
Exit codes: 0 success, 2 input/config error, 3 generation error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


from . import errors
from .data import (
    CLASS_NAMES,
    load_manifest,
    proposals_to_json,
    read_feature_file,
    save_manifest,
)
from .decode import DecodeConfig
from .metrics import fpr_at_recall
from .network import ModelConfig, Network, load_checkpoint
from .synth import SynthConfig, generate_dataset, make_split
from .trainer import (
    TrainConfig,
    bench_throughput,
    detect_video,
    evaluate_split,
    load_split,
    score_clips,
    slice_features,
    train,
)

EXIT_INPUT = 2
EXIT_GENERATION = 3
EXIT_TRAINING = 4


def _limit_threads(n):
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_network(ckpt_path):
    params, meta = load_checkpoint(ckpt_path)
    model_cfg = ModelConfig(**meta["model"])
    return Network(model_cfg), params, meta


def cmd_synth(args):
    if args.config:
        try:
            cfg = SynthConfig.from_json(args.config)
        except json.JSONDecodeError as exc:
            raise errors.ConfigError(
                f"{args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from exc
    else:
        cfg = SynthConfig()
    if args.seed is not None:
        cfg = SynthConfig(**{**cfg.__dict__, "seed": args.seed})
    manifest = generate_dataset(cfg, args.out)
    manifest = make_split(manifest, args.train_fraction, cfg.seed)
    save_manifest(manifest, os.path.join(args.out, "manifest.json"))
    counts = manifest.counts()
    print(f"{'':<10}{'videos':>8}" + "".join(f"{c:>10}" for c in CLASS_NAMES))
    for split in ("train", "test", "total"):
        row = counts[split]
        print(f"{split:<10}{row['videos']:>8}"
              + "".join(f"{row[c]:>10}" for c in CLASS_NAMES))
    return 0


def cmd_train(args):
    manifest = load_manifest(args.data)
    data_dir = os.path.dirname(os.path.abspath(args.data))
    cfg = TrainConfig.from_json(args.train_config) if args.train_config else TrainConfig()
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = TrainConfig(**{**cfg.__dict__, **overrides})
    if args.model_config:
        model_cfg = ModelConfig.from_json(args.model_config)
    else:
        probe = load_split(manifest, data_dir, "train")
        if not probe:
            raise errors.TrainingError("manifest has an empty train split")
        dim = slice_features(probe[0][0], cfg.feature_mode).shape[1]
        model_cfg = ModelConfig(input_dim=dim, pyramid_mode=cfg.pyramid_mode)
    result = train(manifest, data_dir, model_cfg, cfg, args.out)
    try:
        from .report import render_loss_curve

        render_loss_curve(result["metrics_csv"], os.path.join(args.out, "loss_curve.png"))
    except Exception as exc:  # figure rendering must not fail the run
        print(f"warning: could not render loss curve: {exc}", file=sys.stderr)
    print(f"final checkpoint: {result['final_ckpt']}")
    print(f"best checkpoint:  {result['best_ckpt']} "
          f"(epoch {result['best']['epoch']}, mean AP {result['best']['mean_avg']:.4f})")
    return 0


def cmd_eval(args):
    from .report import format_ap_table, render_ap_figure, render_pr_figure, write_ap_csv

    manifest = load_manifest(args.data)
    data_dir = os.path.dirname(os.path.abspath(args.data))
    network, params, meta = _load_network(args.ckpt)
    videos = load_split(manifest, data_dir, "test")
    if not videos:
        raise errors.ManifestError("manifest has an empty test split")
    thresholds = tuple(float(t) for t in args.thresholds.split(","))
    table, proposals = evaluate_split(
        network, params, videos, meta.get("feature_mode", "full"),
        thresholds=thresholds)
    print(format_ap_table(table, thresholds))
    if args.report_dir:
        os.makedirs(args.report_dir, exist_ok=True)
        write_ap_csv(table, os.path.join(args.report_dir, "ap_table.csv"), thresholds)
        ground_truth = {seq.video_id: segs for seq, segs in videos}
        render_ap_figure(table, os.path.join(args.report_dir, "ap_bars.png"), thresholds)
        render_pr_figure(proposals, ground_truth,
                         os.path.join(args.report_dir, "pr_curves.png"),
                         threshold=thresholds[-1])
    return 0


def cmd_detect(args):
    network, params, meta = _load_network(args.ckpt)
    seq = read_feature_file(args.features)
    feats = slice_features(seq, meta.get("feature_mode", "full"))
    proposals = detect_video(network, params, seq, feats, DecodeConfig())
    proposals_to_json(proposals, args.out)
    print(f"{len(proposals)} proposals -> {args.out}")
    return 0


def cmd_clip_eval(args):
    manifest = load_manifest(args.data)
    data_dir = os.path.dirname(os.path.abspath(args.data))
    network, params, meta = _load_network(args.ckpt)
    videos = load_split(manifest, data_dir, "test")
    if not videos:
        raise errors.ManifestError("manifest has an empty test split")
    mode = meta.get("feature_mode", "full")
    scores = {cls: [] for cls in CLASS_NAMES}
    labels = {cls: [] for cls in CLASS_NAMES}
    for seq, segments in videos:
        feats = slice_features(seq, mode)
        for s, y in score_clips(network, params, seq, feats, segments, args.clip_len):
            for cls in CLASS_NAMES:
                scores[cls].append(s[cls])
                labels[cls].append(y[cls])
    print(f"{'class':<10}{'clips':>8}{'positives':>11}{'FPR-95':>9}")
    for cls in CLASS_NAMES:
        n = len(labels[cls])
        n_pos = sum(labels[cls])
        if n_pos == 0:
            raise errors.MetricError(f"no positive clips for class {cls!r}")
        fpr = fpr_at_recall(scores[cls], labels[cls], args.recall)
        print(f"{cls:<10}{n:>8}{n_pos:>11}{fpr:>9.4f}")
    return 0


def cmd_bench(args):
    if args.model_config:
        cfg = ModelConfig.from_json(args.model_config)
    else:
        cfg = ModelConfig(input_dim=args.input_dim)
    report = bench_throughput(cfg, args.T, repetitions=args.repetitions,
                              seed=args.seed or 0)
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actdet",
        description="Train and evaluate the temporal group-activity detector.")
    parser.add_argument("--threads", type=int, default=None,
                        help="limit BLAS threads (1 = reproducibility mode)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-fraction", type=float, default=2 / 3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True, help="dataset manifest JSON")
    p.add_argument("--model-config", help="ModelConfig JSON")
    p.add_argument("--train-config", help="TrainConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AP table on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--thresholds", default="0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--report-dir", help="write CSV and figures here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="detect activities in one feature file")
    p.add_argument("--features", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("clip-eval", help="FPR at a recall target over fixed clips")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip-len", type=float, default=30.0)
    p.add_argument("--recall", type=float, default=0.95)
    p.set_defaults(func=cmd_clip_eval)

    p = sub.add_parser("bench", help="forward+decode throughput")
    p.add_argument("--model-config", help="ModelConfig JSON")
    p.add_argument("--input-dim", type=int, default=64)
    p.add_argument("--T", type=int, default=4096)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except errors.GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except errors.TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except errors.ActdetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
              file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
