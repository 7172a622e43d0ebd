from __future__ import annotations

import csv
import io
import json
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import exhaustive_ap
from pseudotal.evalsuite import (
    ACTIVITYNET_GRID, EvalConfig, ap_rows_csv, ap_table, average_precision, interpolated_ap, match_detections,
    mean_ap, pseudo_label_quality, summary,
)
from pseudotal.geometry import Segment
from pseudotal.selection import Instance


def det(s, e, score=1.0, k=0, vid="v"):
    return Instance(Segment(s, e), k, score, vid)


def test_ap_examples():
    gt = [det(0, 10)]
    assert average_precision([det(0, 6, 0.9)], gt, 0.5) == 1.0  # tIoU 0.6
    two = [det(0, 2, 0.9), det(0, 6, 0.8)]  # tIoU 0.2 then 0.6
    assert average_precision(two, gt, 0.5) == 0.5
    assert average_precision(two, gt, 0.7) == 0.0
    assert average_precision(two, [], 0.5) == 0.0


def test_ap_respects_video_boundaries():
    assert average_precision([det(0, 10, vid="a")], [det(0, 10, vid="b")], 0.5) == 0.0


def test_interpolated_ap_matches_hand_curve():
    # hits at ranks 1 and 3 of 2 GT: (0.5, 1), (1.0, 2/3)
    assert interpolated_ap([True, False, True], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert interpolated_ap([], 3) == 0.0


def test_optimal_matching_beats_greedy_when_it_should():
    # pred 0 overlaps both GT but prefers GT 0; pred 1 only fits GT 0
    overlap = np.array([[0.9, 0.6], [0.8, 0.0]])
    assert match_detections(overlap, 0.5, "greedy").tolist() == [True, False]
    assert match_detections(overlap, 0.5, "optimal").tolist() == [True, True]


def random_case(rng: random.Random):
    gts = []
    for _ in range(rng.randint(0, 4)):
        s = rng.randint(0, 16)
        gts.append((s, s + rng.randint(1, 6)))
    scores = rng.sample(range(1, 1000), rng.randint(0, 8))
    preds = []
    for sc in scores:
        s = rng.randint(0, 16)
        preds.append((s, s + rng.randint(1, 6), sc / 1000))
    return preds, gts, rng.choice([0.1, 0.3, 0.5, 0.7])


def ap_agreement(n_cases: int, seed: int = 0) -> int:
    rng = random.Random(seed)
    bad = 0
    for _ in range(n_cases):
        preds, gts, thr = random_case(rng)
        got = average_precision([det(s, e, sc) for s, e, sc in preds], [det(s, e) for s, e in gts], thr)
        if abs(got - exhaustive_ap(preds, gts, thr)) > 1e-12:
            bad += 1
    return bad


def test_ap_matches_exhaustive_oracle():
    assert ap_agreement(300) == 0


@given(st.lists(st.tuples(st.integers(0, 10), st.integers(1, 5)), min_size=1, max_size=6, unique=True),
       st.lists(st.tuples(st.integers(0, 10), st.integers(1, 5)), max_size=4))
def test_ap_rank_only_and_bounded(pred_spans, gt_spans):
    scores = np.linspace(0.9, 0.1, len(pred_spans))
    preds = [det(s, s + l, float(sc)) for (s, l), sc in zip(pred_spans, scores)]
    gts = [det(s, s + l) for s, l in gt_spans]
    base = average_precision(preds, gts, 0.5)
    assert 0.0 <= base <= 1.0
    squashed = [det(p.segment.start, p.segment.end, p.score ** 3) for p in preds]
    assert average_precision(squashed, gts, 0.5) == base


def test_mean_ap_examples():
    gts = [det(0, 4, k=0), det(5, 9, k=1)]
    per, avg = mean_ap(gts, gts)
    assert avg == 1.0 and set(per.values()) == {1.0}
    per, avg = mean_ap([det(0, 4, k=0)], gts)
    assert avg == 0.5
    assert mean_ap([], gts)[1] == 0.0


def test_mean_ap_skips_classes_without_gt():
    gts = [det(0, 4, k=0)]
    assert mean_ap([det(0, 4, k=0), det(0, 4, 0.5, k=3)], gts)[1] == 1.0


def test_quality_examples():
    gts = [det(0, 10, k=0), det(20, 30, k=1)]
    assert pseudo_label_quality(gts, gts).pos_acc == 1.0
    one = pseudo_label_quality([det(0, 4, k=0)], gts[:1])
    assert (one.class_acc, one.avg_tiou, one.pos_acc) == (1.0, pytest.approx(0.4), 0.0)
    wrong = pseudo_label_quality([det(0, 9, k=1)], gts[:1])
    assert (wrong.class_acc, wrong.pos_acc) == (0.0, 0.0) and wrong.avg_tiou == pytest.approx(0.9)
    empty = pseudo_label_quality([], gts)
    assert empty.n_pseudo == 0 and empty.pos_acc == 0.0 and empty.flags


def test_quality_exclusive_and_per_video_modes():
    gts = [det(0, 10)]
    dup = [det(0, 10), det(0, 10, 0.5)]
    assert pseudo_label_quality(dup, gts).pos_acc == 1.0
    assert pseudo_label_quality(dup, gts, EvalConfig(exclusive_quality=True)).pos_acc == 0.5
    mixed = [det(0, 10, vid="a"), det(0, 10, vid="b"), det(50, 60, vid="b")]
    truth = [det(0, 10, vid="a"), det(0, 10, vid="b")]
    assert pseudo_label_quality(mixed, truth).pos_acc == pytest.approx(2 / 3)
    assert pseudo_label_quality(mixed, truth, EvalConfig(quality_mode="per_video")).pos_acc == pytest.approx(0.75)


spans = st.lists(st.tuples(st.integers(0, 30), st.integers(1, 8), st.integers(0, 2)), max_size=8)


@given(spans, spans)
def test_pos_acc_never_exceeds_class_acc(pseudo, truth):
    q = pseudo_label_quality([det(s, s + l, 0.5, k) for s, l, k in pseudo], [det(s, s + l, 1.0, k) for s, l, k in truth])
    assert 0.0 <= q.pos_acc <= q.class_acc <= 1.0
    assert 0.0 <= q.avg_tiou <= 1.0


def test_report_schema():
    gts = [det(0, 4, k=0), det(5, 9, k=1)]
    rows = ap_table(gts, gts)
    text = ap_rows_csv(rows, ["run", "jump"])
    parsed = list(csv.reader(io.StringIO(text)))
    assert parsed[0] == ["threshold", "class", "ap"] and parsed[1] == ["0.30", "run", "1.000000"]
    assert len(parsed) == 1 + 2 * 5
    per, avg = mean_ap(gts, gts)
    doc = summary(per, avg, pseudo_label_quality(gts, gts))
    assert set(doc) == {"map", "avg", "quality"} and "0.50" in doc["map"]
    json.dumps(doc)


def test_config_validation():
    assert len(ACTIVITYNET_GRID) == 10 and ACTIVITYNET_GRID[-1] == 0.95
    for bad in ((0.5, 0.4), (0.0, 0.5), (0.5, 1.2), ()):
        with pytest.raises(ValueError):
            EvalConfig(tiou_grid=bad)
    with pytest.raises(ValueError):
        EvalConfig(matching="hungarian")
