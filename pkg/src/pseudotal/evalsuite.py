"""Detection mAP over tIoU grids and pseudo-label quality metrics."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import pairwise_tiou
from .selection import Instance

THUMOS_GRID = (0.3, 0.4, 0.5, 0.6, 0.7)
ACTIVITYNET_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class EvalConfig:
    tiou_grid: tuple[float, ...] = THUMOS_GRID
    pos_tiou: float = 0.5
    matching: str = "optimal"  # optimal | greedy
    exclusive_quality: bool = False
    quality_mode: str = "pooled"  # pooled | per_video

    def __post_init__(self) -> None:
        grid = tuple(float(x) for x in self.tiou_grid)
        object.__setattr__(self, "tiou_grid", grid)
        if not grid or any(not 0.0 < x <= 1.0 for x in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("tiou_grid must be strictly increasing within (0, 1]")
        if self.matching not in ("optimal", "greedy"):
            raise ValueError(f"unknown matching {self.matching!r}")
        if self.quality_mode not in ("pooled", "per_video"):
            raise ValueError(f"unknown quality_mode {self.quality_mode!r}")


@dataclass
class QualityReport:
    class_acc: float = 0.0
    avg_tiou: float = 0.0
    pos_acc: float = 0.0
    n_pseudo: int = 0
    n_gt: int = 0
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _overlaps(preds: Sequence[Instance], gts: Sequence[Instance]) -> np.ndarray:
    """tIoU matrix; pairs from different videos never overlap."""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    ov = pairwise_tiou([p.segment.start for p in preds], [p.segment.end for p in preds],
                       [g.segment.start for g in gts], [g.segment.end for g in gts])
    pv = np.array([p.video_id for p in preds])[:, None]
    gv = np.array([g.video_id for g in gts])[None, :]
    return np.where(pv == gv, ov, 0.0)


def _ranked(preds: Sequence[Instance]) -> list[Instance]:
    return sorted(preds, key=lambda p: (-p.score, p.segment.start))


def match_detections(overlap: np.ndarray, thresh: float, matching: str = "optimal") -> np.ndarray:
    """True-positive flags for predictions taken in row order.

    Each new prediction takes the highest-tIoU free ground truth above the
    threshold. In ``optimal`` mode, when none is free it tries to re-route
    earlier matches along an augmenting path, so every prefix holds a
    maximum matching; ``greedy`` stops at the first step.
    """
    n_pred, n_gt = overlap.shape
    owner = -np.ones(n_gt, dtype=int)
    tp = np.zeros(n_pred, dtype=bool)
    adj = [[int(g) for g in np.argsort(-overlap[i], kind="stable") if overlap[i, g] >= thresh]
           for i in range(n_pred)]

    def augment(i: int, seen: set[int]) -> bool:
        for g in adj[i]:
            if g in seen:
                continue
            seen.add(g)
            if owner[g] < 0 or augment(owner[g], seen):
                owner[g] = i
                return True
        return False

    for i in range(n_pred):
        free = [g for g in adj[i] if owner[g] < 0]
        if free:
            owner[free[0]] = i
            tp[i] = True
        elif matching == "optimal" and adj[i]:
            tp[i] = augment(i, set())
    return tp


def interpolated_ap(tp: Sequence[bool], n_gt: int) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    tp = np.asarray(tp, dtype=float)
    if n_gt == 0 or tp.size == 0:
        return 0.0
    hits = np.cumsum(tp)
    precision = hits / np.arange(1, len(tp) + 1)
    recall = hits / n_gt
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def average_precision(preds: Sequence[Instance], gts: Sequence[Instance], tiou_thresh: float,
                      matching: str = "optimal") -> float:
    """Single-class AP. Predictions are ranked by score, ties by start time."""
    if not gts:
        return 0.0
    ranked = _ranked(preds)
    tp = match_detections(_overlaps(ranked, gts), tiou_thresh, matching)
    return interpolated_ap(tp, len(gts))


def ap_table(preds: Iterable[Instance], gts: Iterable[Instance],
             cfg: EvalConfig = EvalConfig()) -> list[tuple[float, int, float]]:
    """(threshold, class, AP) rows for every class that has ground truth."""
    pred_by, gt_by = defaultdict(list), defaultdict(list)
    for p in preds:
        pred_by[p.class_index].append(p)
    for g in gts:
        gt_by[g.class_index].append(g)
    rows = []
    for k in sorted(gt_by):
        ranked = _ranked(pred_by.get(k, []))
        overlap = _overlaps(ranked, gt_by[k])
        for thr in cfg.tiou_grid:
            tp = match_detections(overlap, thr, cfg.matching)
            rows.append((thr, k, interpolated_ap(tp, len(gt_by[k]))))
    return rows


def mean_ap(preds: Iterable[Instance], gts: Iterable[Instance],
            cfg: EvalConfig = EvalConfig()) -> tuple[dict[float, float], float]:
    rows = ap_table(preds, gts, cfg)
    per_thr = {}
    for thr in cfg.tiou_grid:
        vals = [ap for t, _, ap in rows if t == thr]
        per_thr[thr] = float(np.mean(vals)) if vals else 0.0
    return per_thr, float(np.mean(list(per_thr.values())))


def _quality_pooled(pseudo: Sequence[Instance], gts: Sequence[Instance], cfg: EvalConfig) -> QualityReport:
    if not pseudo:
        return QualityReport(n_gt=len(gts), flags=["no pseudo labels"])
    ranked = _ranked(pseudo)
    overlap = _overlaps(ranked, gts)
    taken = np.zeros(len(gts), dtype=bool)
    same_class = hit = 0
    tious = []
    for i, p in enumerate(ranked):
        row = overlap[i].copy()
        if cfg.exclusive_quality:
            row[taken] = -1.0
        if row.size == 0 or row.max() <= 0.0:
            tious.append(0.0)
            continue
        g = int(np.argmax(row))
        taken[g] = True
        best = float(row[g])
        tious.append(best)
        if gts[g].class_index == p.class_index:
            same_class += 1
            if best > cfg.pos_tiou:
                hit += 1
    n = len(ranked)
    return QualityReport(same_class / n, float(np.mean(tious)), hit / n, n, len(gts))


def pseudo_label_quality(pseudo: Sequence[Instance], gts: Sequence[Instance],
                         cfg: EvalConfig = EvalConfig()) -> QualityReport:
    """Class Acc / Avg tIoU / Pos Acc of pseudo labels against ground truth.

    Each pseudo label is compared with its best-overlap ground truth in the
    same video, regardless of class.
    """
    pseudo, gts = list(pseudo), list(gts)
    if cfg.quality_mode == "pooled":
        return _quality_pooled(pseudo, gts, cfg)
    videos = sorted({p.video_id for p in pseudo})
    reports = [_quality_pooled([p for p in pseudo if p.video_id == v],
                               [g for g in gts if g.video_id == v], cfg) for v in videos]
    if not reports:
        return QualityReport(n_gt=len(gts), flags=["no pseudo labels"])
    return QualityReport(
        float(np.mean([r.class_acc for r in reports])),
        float(np.mean([r.avg_tiou for r in reports])),
        float(np.mean([r.pos_acc for r in reports])),
        len(pseudo), len(gts), ["per_video"],
    )


def ap_rows_csv(rows: Sequence[tuple[float, int, float]], class_names: Optional[Sequence[str]] = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "class", "ap"])
    for thr, k, ap in rows:
        name = class_names[k] if class_names else k
        writer.writerow([f"{thr:.2f}", name, f"{ap:.6f}"])
    return buf.getvalue()


def summary(per_thr: dict[float, float], avg: float, quality: Optional[QualityReport] = None) -> dict:
    return {
        "map": {f"{t:.2f}": v for t, v in per_thr.items()},
        "avg": avg,
        "quality": quality.as_dict() if quality is not None else {},
    }
