"""Tests for detection metrics and clip splitting."""

import numpy as np
import pytest

from actdet.data import FeatureSequence, Proposal, Segment
from actdet.errors import MetricError
from actdet.metrics import (
    DEFAULT_TIOU_THRESHOLDS,
    ap_table,
    average_precision,
    clip_split,
    fpr_at_recall,
    precision_recall,
    tiou,
)


def prop(vid, label, start, end, score):
    return Proposal(vid, label, start, end, score)


def test_tiou_hand_values():
    assert tiou((0.0, 10.0), (5.0, 15.0)) == pytest.approx(5.0 / 15.0)
    assert tiou((0.0, 10.0), (0.0, 10.0)) == 1.0
    assert tiou((0.0, 1.0), (2.0, 3.0)) == 0.0
    assert tiou((0.0, 4.0), (2.0, 4.0)) == pytest.approx(0.5)


def test_perfect_detection_gives_ap_one():
    gt = {"v": [Segment("time_out", 10.0, 40.0)]}
    props = [prop("v", "time_out", 10.0, 40.0, 0.9)]
    assert average_precision(props, gt, "time_out", 0.5) == pytest.approx(1.0)


def test_wrong_then_right_gives_ap_half():
    # rank 1 misses, rank 2 hits: envelope precision at full recall is 1/2
    gt = {"v": [Segment("stop", 10.0, 20.0)]}
    props = [
        prop("v", "stop", 50.0, 60.0, 0.9),
        prop("v", "stop", 10.0, 20.0, 0.8),
    ]
    assert average_precision(props, gt, "stop", 0.5) == pytest.approx(0.5)


def test_ap_nan_without_ground_truth():
    props = [prop("v", "stop", 0.0, 5.0, 0.5)]
    assert np.isnan(average_precision(props, {"v": []}, "stop", 0.5))
    assert average_precision([], {"v": [Segment("stop", 0.0, 5.0)]},
                             "stop", 0.5) == 0.0


def test_match_is_per_video():
    gt = {"a": [Segment("time_out", 0.0, 10.0)], "b": []}
    props = [prop("b", "time_out", 0.0, 10.0, 0.9)]
    assert average_precision(props, gt, "time_out", 0.5) == 0.0


def test_each_ground_truth_matches_once():
    # two copies of a perfect proposal: the second one is a false positive
    gt = {"v": [Segment("stop", 5.0, 15.0)]}
    props = [prop("v", "stop", 5.0, 15.0, 0.9),
             prop("v", "stop", 5.0, 15.0, 0.8)]
    recall, precision = precision_recall(props, gt, "stop", 0.5)
    assert recall.tolist() == [1.0, 1.0]
    assert precision.tolist() == [1.0, 0.5]


def test_ap_matches_numeric_envelope_integration():
    # independent oracle: rectangle-sum the precision envelope over a dense
    # recall grid
    rng = np.random.default_rng(17)
    for _ in range(100):
        gt = {"v": [], "w": []}
        for vid in gt:
            t = 0.0
            for _ in range(int(rng.integers(0, 4))):
                t += rng.uniform(1, 20)
                d = rng.uniform(2, 15)
                gt[vid].append(Segment("time_out", t, t + d))
                t += d
        props = []
        for _ in range(int(rng.integers(0, 7))):
            vid = ["v", "w"][int(rng.integers(0, 2))]
            s = rng.uniform(0, 80)
            props.append(prop(vid, "time_out", s, s + rng.uniform(1, 20),
                              float(rng.random())))
        ap = average_precision(props, gt, "time_out", 0.3)
        pr = precision_recall(props, gt, "time_out", 0.3)
        if pr is None:
            assert np.isnan(ap)
            continue
        recall, precision = pr
        grid = np.linspace(0.0, 1.0, 100001)[1:]
        env = np.zeros_like(grid)
        for r, p in zip(recall, precision):
            env[grid <= r] = np.maximum(env[grid <= r], p)
        approx = env.sum() / len(grid)
        assert ap == pytest.approx(approx, abs=2e-4)
        assert 0.0 <= ap <= 1.0


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(29)
    gt = {"v": [Segment("stop", 10.0, 30.0), Segment("stop", 50.0, 70.0)]}
    props = [prop("v", "stop", rng.uniform(0, 60),
                  rng.uniform(60, 90), float(rng.random()))
             for _ in range(8)]
    aps = [average_precision(props, gt, "stop", t)
           for t in DEFAULT_TIOU_THRESHOLDS]
    assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


def test_ap_invariant_to_proposal_order():
    gt = {"v": [Segment("time_out", 0.0, 10.0), Segment("time_out", 20.0, 30.0)]}
    props = [prop("v", "time_out", 0.0, 10.0, 0.7),
             prop("v", "time_out", 21.0, 31.0, 0.6),
             prop("v", "time_out", 40.0, 50.0, 0.5)]
    ref = average_precision(props, gt, "time_out", 0.5)
    assert average_precision(props[::-1], gt, "time_out", 0.5) == ref


def test_ap_table_shape_and_mean():
    gt = {"v": [Segment("time_out", 10.0, 40.0)]}
    props = [prop("v", "time_out", 10.0, 40.0, 0.9)]
    table = ap_table(props, gt)
    assert set(table) == {"time_out", "stop", "mean_avg"}
    assert table["time_out"]["avg"] == pytest.approx(1.0)
    assert np.isnan(table["stop"]["avg"])
    # only classes with ground truth enter the mean
    assert table["mean_avg"] == pytest.approx(1.0)


def test_fpr_hand_example():
    # recall 0.95 first reached at threshold 0.7, which admits one of the
    # two negatives
    assert fpr_at_recall([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == pytest.approx(0.5)


def test_fpr_equal_scores():
    assert fpr_at_recall([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 1.0


def test_fpr_separable_scores():
    assert fpr_at_recall([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 0.0


def test_fpr_monotone_in_recall_target():
    rng = np.random.default_rng(41)
    scores = rng.random(60)
    labels = (rng.random(60) < 0.4).astype(int)
    labels[0] = 1
    vals = [fpr_at_recall(scores, labels, t) for t in (0.5, 0.7, 0.9, 0.99)]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


def test_fpr_requires_positives():
    with pytest.raises(MetricError):
        fpr_at_recall([0.5, 0.4], [0, 0])


def video(duration_s, fps=1.0):
    n = int(np.floor(duration_s * fps)) + 1
    feats = np.arange(n * 2, dtype=np.float32).reshape(n, 2)
    return FeatureSequence("v", feats, fps, duration_s, d_g=1)


def test_clip_split_counts():
    assert len(clip_split(video(90.0), [])) == 3
    assert len(clip_split(video(100.0), [])) == 3
    assert len(clip_split(video(29.0), [])) == 0


def test_clip_split_majority_overlap_rule():
    segs = [Segment("time_out", 30.0, 60.0), Segment("stop", 64.0, 73.0)]
    clips = clip_split(video(90.0), segs)
    labels = [c[1] for c in clips]
    assert [l["time_out"] for l in labels] == [0, 1, 0]
    # 9 s of stop inside clip 3 is under the 15 s majority bar
    assert [l["stop"] for l in labels] == [0, 0, 0]


def test_clip_split_features_cover_clip_window():
    clips = clip_split(video(90.0), [])
    for k, (feats, _) in enumerate(clips):
        assert feats.shape[0] == 30
        assert feats[0, 0] == pytest.approx(k * 30 * 2)


def test_clip_split_rejects_bad_length():
    with pytest.raises(MetricError):
        clip_split(video(90.0), [], clip_len_s=0.0)
