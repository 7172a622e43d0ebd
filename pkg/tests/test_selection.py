from __future__ import annotations

import math
import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import hard_nms
from pseudotal.geometry import Segment
from pseudotal.quality import FramePredictions
from pseudotal.selection import (
    Instance, SelectionConfig, decode_instances, dynamic_partition, dynamic_threshold, fixed_partition,
    select_pseudo_labels, soft_nms,
)


def inst(start, end, score, k=0, frame=None):
    return Instance(Segment(start, end), k, score, "v", frame)


def scored(scores):
    return [inst(i, i + 1, s, frame=i) for i, s in enumerate(scores)]


def test_decode_example():
    t = 8
    cls = np.zeros((3, t))
    cls[2, 5] = 0.9
    p = FramePredictions(cls, np.full(t, 0.8), np.full(t, 0.1), np.tile([[1.0], [3.0]], (1, t)))
    out = decode_instances(p, np.arange(t, dtype=float))
    top = out[0]
    assert top.segment == Segment(4, 8) and top.class_index == 2
    assert top.score == pytest.approx(0.63, abs=1e-12)
    assert top.source_frame == 5


def test_decode_drops_zero_length():
    p = FramePredictions(np.full((1, 3), 0.5), np.full(3, 0.9), np.zeros(3), np.zeros((2, 3)))
    tally = Counter()
    assert decode_instances(p, [0.0, 1.0, 2.0], tally=tally) == []
    assert tally["dropped_zero_length"] == 3


def test_decode_empty_and_topk():
    empty = FramePredictions(np.zeros((2, 0)), np.zeros(0), np.zeros(0), np.zeros((2, 0)))
    assert decode_instances(empty, []) == []
    p = FramePredictions(np.random.default_rng(0).uniform(size=(2, 10)), np.full(10, 0.9), np.zeros(10),
                         np.ones((2, 10)))
    out = decode_instances(p, np.arange(10.0), SelectionConfig(pre_nms_topk=4))
    assert len(out) == 4
    assert [i.score for i in out] == sorted((i.score for i in out), reverse=True)


def test_decode_multiclass_flag():
    cls = np.array([[0.9, 0.1], [0.8, 0.7]])
    p = FramePredictions(cls, np.ones(2), np.zeros(2), np.ones((2, 2)))
    assert len(decode_instances(p, [0.0, 1.0])) == 2
    assert len(decode_instances(p, [0.0, 1.0], SelectionConfig(multiclass=True))) == 3


def test_soft_nms_decay_fixture():
    # tIoU([0,8],[2,10]) = 0.6, so the runner-up decays to 0.8 * exp(-0.72)
    out = soft_nms([inst(0, 8, 0.9), inst(2, 10, 0.8)], SelectionConfig(nms_sigma=0.5))
    assert [round(i.score, 6) for i in out] == [0.9, 0.389402]
    assert out[1].score == pytest.approx(0.8 * math.exp(-0.36 / 0.5), abs=1e-12)


def test_soft_nms_disjoint_and_cross_class_unchanged():
    disjoint = [inst(0, 1, 0.9), inst(2, 3, 0.8)]
    assert [i.score for i in soft_nms(disjoint)] == [0.9, 0.8]
    cross = [inst(0, 4, 0.9, k=0), inst(0, 4, 0.8, k=1)]
    assert [i.score for i in soft_nms(cross)] == [0.9, 0.8]


def test_soft_nms_drops_below_floor():
    out = soft_nms([inst(0, 4, 0.9), inst(0, 4, 0.1)], SelectionConfig(nms_sigma=0.1, nms_floor=0.001))
    assert len(out) == 1


def random_instance_set(rng: random.Random, n: int):
    items = []
    for _ in range(n):
        s = rng.randrange(0, 20) / 2
        items.append((s, s + rng.randrange(1, 10) / 2, rng.randrange(2), rng.randrange(10, 1000) / 1000))
    return items


def test_soft_nms_small_sigma_is_hard_nms():
    rng = random.Random(11)
    cfg = SelectionConfig(nms_sigma=1e-9, nms_floor=1e-6)
    for _ in range(200):
        items = random_instance_set(rng, rng.randrange(1, 11))
        got = soft_nms([inst(s, e, sc, k) for s, e, k, sc in items], cfg)
        assert sorted((i.segment.start, i.segment.end, i.class_index, i.score) for i in got) == hard_nms(items)


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(1, 8), st.integers(0, 2),
                          st.floats(min_value=0.01, max_value=1.0)), max_size=12))
def test_soft_nms_never_raises_scores_or_moves_segments(raw):
    items = [inst(s, s + l, sc, k, frame=i) for i, (s, l, k, sc) in enumerate(raw)]
    original = {i.source_frame: i for i in items}
    for out in soft_nms(items):
        src = original[out.source_frame]
        assert out.score <= src.score
        assert out.segment == src.segment and out.class_index == src.class_index


def test_dynamic_partition_fixture():
    pls = dynamic_partition(scored([0.9, 0.7, 0.5, 0.1]), SelectionConfig(tau_neg=0.15))
    assert pls.tau_pos == pytest.approx(0.7 + math.sqrt(0.08 / 3), abs=1e-12)
    assert round(pls.tau_pos, 6) == 0.863299
    assert [i.score for i in pls.positives] == [0.9]
    assert [i.score for i in pls.candidates] == [0.7, 0.5]
    assert [i.score for i in pls.rejected] == [0.1]


def test_dynamic_partition_degenerate_cases():
    single = dynamic_partition(scored([0.5]))
    assert single.tau_pos == 0.5 and [i.score for i in single.positives] == [0.5]
    low = dynamic_partition(scored([0.1, 0.15, 0.05]))
    assert not low.positives and not low.candidates and len(low.rejected) == 3
    assert low.tau_pos == 1.0 and "no survivors" in low.flags


def test_dynamic_threshold_multiplier():
    assert dynamic_threshold([0.9, 0.7, 0.5], 0.15, 0.0) == pytest.approx(0.7)
    assert dynamic_threshold([0.1], 0.15) is None


def test_fixed_partition():
    pls = fixed_partition(scored([0.9, 0.3, 0.2, 0.1]), 0.3)
    assert [i.score for i in pls.positives] == [0.9, 0.3]
    assert [i.score for i in pls.candidates] == [0.2]
    with pytest.raises(ValueError):
        fixed_partition([], 0.1)


score_lists = st.lists(st.floats(min_value=0.0, max_value=1.0), max_size=20)


@given(score_lists, st.randoms())
def test_partition_exhaustive_exclusive_order_invariant(scores, rnd):
    items = scored(scores)
    pls = dynamic_partition(items)
    keys = [i.key for i in pls.all_instances()]
    assert sorted(keys) == sorted(i.key for i in items)
    assert len(set(keys)) == len(keys)
    shuffled = list(items)
    rnd.shuffle(shuffled)
    again = dynamic_partition(shuffled)
    for tier in ("positives", "candidates", "rejected"):
        assert getattr(again, tier) == getattr(pls, tier)
    assert again.tau_pos == pls.tau_pos


@given(score_lists)
def test_positives_dominate_candidates(scores):
    pls = dynamic_partition(scored(scores))
    for p in pls.positives:
        assert p.score >= pls.tau_pos - 1e-9
        for c in pls.candidates:
            assert p.score >= c.score
    for c in pls.candidates:
        assert pls.tau_neg < c.score < pls.tau_pos
    assert pls.tau_neg < pls.tau_pos <= 1.0


@given(score_lists, st.integers(0, 19), st.floats(min_value=0.0, max_value=0.5))
def test_raising_score_never_demotes_at_fixed_threshold(scores, idx, bump):
    if not scores:
        return
    idx %= len(scores)
    tier_rank = {"rejected": 0, "candidates": 1, "positives": 2}
    before = fixed_partition(scored(scores), 0.5)
    raised = list(scores)
    raised[idx] = min(1.0, raised[idx] + bump)
    after = fixed_partition(scored(raised), 0.5)
    key = scored(scores)[idx].key
    assert tier_rank[after.tier_of(key)] >= tier_rank[before.tier_of(key)]


def test_select_pipeline_zero_noise_single_instance():
    t = 10
    cls = np.full((2, t), 0.01)
    cls[1, 3:7] = 0.9
    offsets = np.ones((2, t))
    for f in range(3, 7):
        offsets[:, f] = (f - 3, 6 - f)
    offsets[:, 3] = (0.0, 3.0)
    offsets[:, 6] = (3.0, 0.0)
    p = FramePredictions(cls, np.full(t, 1.0), np.zeros(t), offsets)
    pls = select_pseudo_labels(p, np.arange(t, dtype=float), "v")
    assert [(i.segment, i.class_index) for i in pls.positives] == [(Segment(3, 6), 1)]
