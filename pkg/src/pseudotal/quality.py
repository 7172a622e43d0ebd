"""Joint classification/localization scoring and the loss terms around it."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import FrameTargets, Segment, diou

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


@dataclass
class FramePredictions:
    """Detector outputs on a frame grid of length T.

    ``cls`` is K x T sigmoid scores, ``offsets`` is 2 x T (left, right)
    distances in seconds from each frame to its predicted boundaries.
    """

    cls: np.ndarray
    tiou_hat: np.ndarray
    tnd_hat: np.ndarray
    offsets: np.ndarray

    def __post_init__(self) -> None:
        self.cls = np.atleast_2d(np.asarray(self.cls, dtype=float))
        self.tiou_hat = np.asarray(self.tiou_hat, dtype=float).reshape(-1)
        self.tnd_hat = np.asarray(self.tnd_hat, dtype=float).reshape(-1)
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(2, -1)
        t = self.cls.shape[1]
        if not (len(self.tiou_hat) == len(self.tnd_hat) == self.offsets.shape[1] == t):
            raise ValueError(
                f"frame count mismatch: cls={t} tiou={len(self.tiou_hat)} "
                f"tnd={len(self.tnd_hat)} offsets={self.offsets.shape[1]}"
            )
        for name in ("cls", "tiou_hat", "tnd_hat"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"{name} scores must lie in [0, 1]")
        if self.offsets.size and self.offsets.min() < 0.0:
            raise ValueError("offsets must be non-negative")

    @property
    def n_classes(self) -> int:
        return self.cls.shape[0]

    @property
    def n_frames(self) -> int:
        return self.cls.shape[1]


@dataclass(frozen=True)
class ScoringConfig:
    epsilon: float = 0.01
    focal_gamma: float = 2.0

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")


@dataclass(frozen=True)
class LossWeights:
    beta: float = 2.0
    lambda_reg: float = 1.0
    lambda_locq: float = 0.1
    lambda_acp: float = 0.1

    def __post_init__(self) -> None:
        for name in ("beta", "lambda_reg", "lambda_locq", "lambda_acp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class LossReport:
    """Frame-summed loss components of one branch (supervised or unsupervised)."""

    cls: float = 0.0
    reg: float = 0.0
    locq: float = 0.0
    acp: float = 0.0
    icd: float = 0.0
    n_pos: int = 1
    total: float = 0.0


def localization_reliability(tiou_hat, tnd_hat, epsilon: float) -> np.ndarray:
    return np.maximum(np.asarray(tiou_hat, dtype=float) - np.asarray(tnd_hat, dtype=float), epsilon)


def joint_score(preds: FramePredictions, cfg: ScoringConfig = ScoringConfig()) -> np.ndarray:
    """K x T joint score: clamped (tIoU - tND) reliability times class score."""
    rel = localization_reliability(preds.tiou_hat, preds.tnd_hat, cfg.epsilon)
    return preds.cls * rel[None, :]


def soft_label(class_index: int, targets: tuple[float, float], n_classes: int,
               cfg: ScoringConfig = ScoringConfig()) -> np.ndarray:
    if not 0 <= class_index < n_classes:
        raise ValueError(f"class_index {class_index} out of range for K={n_classes}")
    t_iou, t_nd = targets
    label = np.zeros(n_classes)
    label[class_index] = max(t_iou - t_nd, cfg.epsilon)
    return label


def bce(pred, target) -> np.ndarray:
    """Elementwise soft-target binary cross entropy with clamped predictions."""
    p = np.clip(np.asarray(pred, dtype=float), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.clip(np.asarray(target, dtype=float), BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def focal_loss(pred, target, gamma: float = 2.0, reduction: str = "sum") -> float:
    """Quality-focal loss |y - p|^gamma * BCE(p, y), summed over classes by default."""
    p = np.asarray(pred, dtype=float)
    y = np.asarray(target, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: pred {p.shape} vs target {y.shape}")
    terms = np.abs(y - p) ** gamma * bce(p, y)
    if reduction == "mean":
        return float(terms.mean())
    return float(terms.sum())


def locq_loss(preds: FramePredictions, targets: FrameTargets) -> float:
    mask = np.asarray(targets.inside_mask, dtype=bool)
    if len(mask) != preds.n_frames:
        raise ValueError(f"mask length {len(mask)} != frame count {preds.n_frames}")
    if not mask.any():
        log.warning("locq_loss: no positive frames")
        return 0.0
    per_frame = bce(preds.tiou_hat[mask], targets.tiou[mask]) + bce(preds.tnd_hat[mask], targets.tnd[mask])
    return float(per_frame.mean())


def diou_loss(pred: Segment, gt: Segment) -> float:
    return 1.0 - diou(pred, gt)


def _branch(r: LossReport, w: LossWeights) -> float:
    framewise = r.cls + w.lambda_reg * r.reg + w.lambda_locq * r.locq
    if r.n_pos <= 0:
        if framewise != 0.0:
            raise ValueError("degenerate positive count: n_pos=0 with nonzero frame losses")
        return w.lambda_acp * r.acp
    return framewise / r.n_pos + w.lambda_acp * r.acp


def assemble_total_loss(sup: LossReport, unsup: LossReport, w: LossWeights = LossWeights()) -> float:
    """Supervised branch + ICD objective + beta-weighted unsupervised branch.

    The unsupervised report's ``icd`` field is ignored; the discriminator is
    trained on labeled instances only.
    """
    return _branch(sup, w) + sup.icd + w.beta * _branch(unsup, w)
