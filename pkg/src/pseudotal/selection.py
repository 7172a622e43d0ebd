"""Frame-level predictions -> ranked, deduplicated, tiered pseudo labels."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Segment, pairwise_tiou
from .quality import FramePredictions, ScoringConfig, joint_score

log = logging.getLogger(__name__)

# scores within this distance of tau_pos count as ties (inclusive into positives)
TIE_TOL = 1e-9


@dataclass(frozen=True)
class Instance:
    segment: Segment
    class_index: int
    score: float
    video_id: str = ""
    source_frame: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"instance score must lie in [0, 1], got {self.score}")

    @property
    def key(self) -> str:
        return f"{self.video_id}:{self.source_frame}:{self.class_index}"

    def with_score(self, score: float) -> "Instance":
        return Instance(self.segment, self.class_index, score, self.video_id, self.source_frame)


def rank_key(inst: Instance):
    return (-inst.score, inst.segment.start, inst.video_id, inst.class_index,
            -1 if inst.source_frame is None else inst.source_frame)


@dataclass(frozen=True)
class SelectionConfig:
    tau_neg: float = 0.15
    nms_sigma: float = 0.5
    nms_floor: float = 0.001
    pre_nms_topk: int = 2000
    std_multiplier: float = 1.0
    multiclass: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_neg < 1.0:
            raise ValueError("tau_neg must lie in [0, 1)")
        if self.nms_sigma <= 0:
            raise ValueError("nms_sigma must be positive")
        if not 0.0 <= self.nms_floor < 1.0:
            raise ValueError("nms_floor must lie in [0, 1)")
        if self.pre_nms_topk < 1:
            raise ValueError("pre_nms_topk must be positive")


@dataclass
class LogEntry:
    instance_id: str
    action: str  # kept | eap_removed | mpp_promoted | unscorable
    similarity: float


@dataclass
class PseudoLabelSet:
    positives: list[Instance] = field(default_factory=list)
    candidates: list[Instance] = field(default_factory=list)
    rejected: list[Instance] = field(default_factory=list)
    tau_pos: float = 1.0
    tau_neg: float = 0.15
    refinement_log: list[LogEntry] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def all_instances(self) -> list[Instance]:
        return [*self.positives, *self.candidates, *self.rejected]

    def tier_of(self, key: str) -> str:
        for name in ("positives", "candidates", "rejected"):
            if any(i.key == key for i in getattr(self, name)):
                return name
        raise KeyError(key)


def decode_instances(
    preds: FramePredictions,
    frame_times: Sequence[float],
    cfg: SelectionConfig = SelectionConfig(),
    scoring: ScoringConfig = ScoringConfig(),
    video_id: str = "",
    tally: Counter | None = None,
) -> list[Instance]:
    """One instance per frame at its best joint-score class.

    With ``cfg.multiclass`` every class whose joint score exceeds tau_neg
    yields an instance. Zero-length decodes are dropped and counted in
    ``tally["dropped_zero_length"]``.
    """
    times = np.asarray(frame_times, dtype=float)
    if len(times) != preds.n_frames:
        raise ValueError(f"{len(times)} frame times for {preds.n_frames} frames")
    if preds.n_frames == 0:
        return []
    scores = joint_score(preds, scoring)
    starts = times - preds.offsets[0]
    ends = times + preds.offsets[1]

    if cfg.multiclass:
        ks, ts = np.nonzero(scores > cfg.tau_neg)
    else:
        ts = np.arange(preds.n_frames)
        ks = scores.argmax(axis=0)

    out = []
    dropped = 0
    for k, t in zip(ks.tolist(), ts.tolist()):
        s, e = float(starts[t]), float(ends[t])
        if not (math.isfinite(s) and math.isfinite(e)) or s >= e:
            dropped += 1
            continue
        score = float(min(max(scores[k, t], 0.0), 1.0))
        out.append(Instance(Segment(s, e), int(k), score, video_id, int(t)))
    if dropped:
        log.debug("decode %s: dropped %d zero-length segments", video_id, dropped)
    if tally is not None:
        tally["dropped_zero_length"] += dropped
        tally["decoded"] += len(out)
    out.sort(key=rank_key)
    return out[: cfg.pre_nms_topk]


def soft_nms(instances: Iterable[Instance], cfg: SelectionConfig = SelectionConfig()) -> list[Instance]:
    """Gaussian Soft-NMS, applied independently within each class."""
    by_class: dict[int, list[Instance]] = {}
    for inst in instances:
        by_class.setdefault(inst.class_index, []).append(inst)

    kept: list[Instance] = []
    for k in sorted(by_class):
        group = sorted(by_class[k], key=rank_key)
        starts = np.array([i.segment.start for i in group])
        ends = np.array([i.segment.end for i in group])
        overlap = pairwise_tiou(starts, ends, starts, ends)
        scores = np.array([i.score for i in group])
        alive = np.ones(len(group), dtype=bool)
        while alive.any():
            cand = np.flatnonzero(alive)
            # first maximum in rank order keeps tie-breaking deterministic
            best = cand[np.argmax(scores[cand])]
            alive[best] = False
            kept.append(group[best].with_score(float(scores[best])))
            rest = np.flatnonzero(alive)
            if rest.size == 0:
                break
            decay = np.exp(-(overlap[best, rest] ** 2) / cfg.nms_sigma)
            scores[rest] *= decay
            alive[rest[scores[rest] < cfg.nms_floor]] = False
    kept.sort(key=rank_key)
    return kept


def _partition(instances: Sequence[Instance], tau_pos: float, tau_neg: float,
               flags: list[str]) -> PseudoLabelSet:
    ordered = sorted(instances, key=rank_key)
    pls = PseudoLabelSet(tau_pos=tau_pos, tau_neg=tau_neg, flags=flags)
    for inst in ordered:
        if inst.score <= tau_neg:
            pls.rejected.append(inst)
        elif inst.score >= tau_pos - TIE_TOL:
            pls.positives.append(inst)
        else:
            pls.candidates.append(inst)
    return pls


def dynamic_threshold(scores: Sequence[float], tau_neg: float, std_multiplier: float = 1.0) -> Optional[float]:
    """mean + k * population std of the scores above tau_neg, clamped to (tau_neg, 1]."""
    s = np.sort(np.asarray([x for x in scores if x > tau_neg], dtype=float))
    if s.size == 0:
        return None
    tau = float(s.mean() + std_multiplier * s.std())
    return min(max(tau, math.nextafter(tau_neg, 1.0)), 1.0)


def dynamic_partition(instances: Sequence[Instance], cfg: SelectionConfig = SelectionConfig()) -> PseudoLabelSet:
    tau_pos = dynamic_threshold([i.score for i in instances], cfg.tau_neg, cfg.std_multiplier)
    if tau_pos is None:
        log.info("dynamic_partition: no survivors above tau_neg=%s", cfg.tau_neg)
        return _partition(instances, 1.0, cfg.tau_neg, ["no survivors"])
    return _partition(instances, tau_pos, cfg.tau_neg, [])


def fixed_partition(instances: Sequence[Instance], tau_pos: float,
                    cfg: SelectionConfig = SelectionConfig()) -> PseudoLabelSet:
    """Baseline split with a constant positive threshold."""
    if not cfg.tau_neg < tau_pos <= 1.0:
        raise ValueError("fixed tau_pos must lie in (tau_neg, 1]")
    return _partition(instances, tau_pos, cfg.tau_neg, ["fixed threshold"])


def select_pseudo_labels(
    preds: FramePredictions,
    frame_times: Sequence[float],
    video_id: str = "",
    cfg: SelectionConfig = SelectionConfig(),
    scoring: ScoringConfig = ScoringConfig(),
    fixed_tau_pos: Optional[float] = None,
    tally: Counter | None = None,
) -> PseudoLabelSet:
    """decode -> Soft-NMS -> tier split for one video."""
    decoded = decode_instances(preds, frame_times, cfg, scoring, video_id, tally)
    survivors = soft_nms(decoded, cfg)
    if fixed_tau_pos is not None:
        return fixed_partition(survivors, fixed_tau_pos, cfg)
    return dynamic_partition(survivors, cfg)
