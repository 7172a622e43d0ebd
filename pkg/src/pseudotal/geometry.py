"""Temporal interval arithmetic.

All quantities are in seconds. Overlap (tIoU), normalized center distance
(tND) and their difference (DIoU) are the three localization measures the
rest of the package is built on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True, order=True)
class Segment:
    start: float
    end: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"segment bounds must be finite, got [{self.start}, {self.end}]")
        if not self.start < self.end:
            raise ValueError(f"segment must satisfy start < end, got [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    def contains(self, t: float) -> bool:
        return self.start <= t <= self.end

    def shifted(self, offset: float) -> "Segment":
        return Segment(self.start + offset, self.end + offset)

    def scaled(self, factor: float) -> "Segment":
        return Segment(self.start * factor, self.end * factor)


def _intersection(a: Segment, b: Segment) -> float:
    return max(0.0, min(a.end, b.end) - max(a.start, b.start))


def tiou(a: Segment, b: Segment) -> float:
    inter = _intersection(a, b)
    union = a.length + b.length - inter
    return inter / union


def tnd(a: Segment, b: Segment) -> float:
    """Squared center distance over the squared length of the smallest cover."""
    cover = max(a.end, b.end) - min(a.start, b.start)
    rho = a.center - b.center
    value = (rho * rho) / (cover * cover)
    assert value < 1.0
    return value


def diou(a: Segment, b: Segment) -> float:
    return tiou(a, b) - tnd(a, b)


def pairwise_tiou(starts_a, ends_a, starts_b, ends_b) -> np.ndarray:
    """Vectorized tIoU matrix of shape (len(a), len(b))."""
    sa = np.asarray(starts_a, dtype=float)[:, None]
    ea = np.asarray(ends_a, dtype=float)[:, None]
    sb = np.asarray(starts_b, dtype=float)[None, :]
    eb = np.asarray(ends_b, dtype=float)[None, :]
    inter = np.clip(np.minimum(ea, eb) - np.maximum(sa, sb), 0.0, None)
    union = (ea - sa) + (eb - sb) - inter
    return inter / union


def regression_targets(gt: Segment, frame_times: Sequence[float]) -> list[tuple[float, float]]:
    """Distances from each frame to the action boundaries: (t - start, end - t)."""
    out = []
    for t in frame_times:
        if not gt.contains(t):
            raise ValueError(f"frame not inside action: t={t} outside [{gt.start}, {gt.end}]")
        out.append((t - gt.start, gt.end - t))
    return out


@dataclass
class FrameTargets:
    """Per-frame localization-quality targets; values outside the mask are 0."""

    tiou: np.ndarray
    tnd: np.ndarray
    inside_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.inside_mask)


def locq_targets(
    predicted: Sequence[Segment | None],
    gt: Sequence[Segment | None],
    inside_mask: Sequence[bool],
) -> FrameTargets:
    mask = np.asarray(inside_mask, dtype=bool)
    if not (len(predicted) == len(gt) == len(mask)):
        raise ValueError(
            f"length mismatch: predicted={len(predicted)} gt={len(gt)} mask={len(mask)}"
        )
    n = len(mask)
    tiou_t = np.zeros(n)
    tnd_t = np.zeros(n)
    for i in np.flatnonzero(mask):
        p, g = predicted[i], gt[i]
        if p is None or g is None:
            raise ValueError(f"frame {i} is masked in but has no predicted or gt segment")
        tiou_t[i] = tiou(p, g)
        tnd_t[i] = tnd(p, g)
    return FrameTargets(tiou=tiou_t, tnd=tnd_t, inside_mask=mask)


def frame_times(n_frames: int, fps: float) -> np.ndarray:
    """Timestamps of a uniform frame grid starting at 0."""
    return np.arange(n_frames, dtype=float) / fps


def frames_in_segment(seg: Segment, fps: float, n_frames: int) -> np.ndarray:
    """Indices of grid frames whose timestamp lies inside ``seg``.

    Falls back to the single nearest frame when the segment is shorter than
    the frame spacing.
    """
    times = frame_times(n_frames, fps)
    idx = np.flatnonzero((times >= seg.start) & (times <= seg.end))
    if idx.size == 0 and n_frames > 0:
        nearest = int(np.clip(round(seg.center * fps), 0, n_frames - 1))
        idx = np.array([nearest])
    return idx
