"""Action-aware contrastive targets and InfoNCE losses.

Coarse contrast clusters the sampled frames of one video into two groups
(action vs background); fine contrast clusters the frames of every video in
the batch into ``fine_clusters_b`` groups. Both use the same multi-positive
InfoNCE form on unit-normalized features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

MIN_TEMPERATURE = 1e-6


@dataclass(frozen=True)
class AcpConfig:
    partitions_n: int = 16
    coarse_clusters: int = 2
    fine_clusters_b: int = 4
    temperature: float = 0.07
    kmeans_restarts: int = 4
    kmeans_max_iters: int = 100
    batch_videos: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.coarse_clusters != 2:
            raise ValueError("coarse contrast is binary; coarse_clusters must be 2")
        if self.fine_clusters_b < 2:
            raise ValueError("fine_clusters_b must be at least 2")
        if self.temperature < MIN_TEMPERATURE:
            raise ValueError("temperature must be positive")
        if min(self.partitions_n, self.kmeans_restarts, self.kmeans_max_iters, self.batch_videos) < 1:
            raise ValueError("partitions, restarts, iterations and batch size must be positive")


@dataclass
class ContrastBatch:
    features: np.ndarray
    labels: np.ndarray
    temperature: float = 0.07
    granularity: str = "coarse"

    def __post_init__(self) -> None:
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} features but {len(self.labels)} labels")
        if self.temperature < MIN_TEMPERATURE:
            raise ValueError(f"temperature {self.temperature} below {MIN_TEMPERATURE}")
        if self.granularity not in ("coarse", "fine"):
            raise ValueError(f"unknown granularity {self.granularity!r}")


def partition_bounds(n_frames: int, n: int) -> list[tuple[int, int]]:
    """Split [0, n_frames) into n contiguous bins; the remainder widens leading bins."""
    if n < 1 or n > n_frames:
        raise ValueError(f"cannot take {n} partitions of {n_frames} frames")
    base, extra = divmod(n_frames, n)
    bounds, lo = [], 0
    for i in range(n):
        hi = lo + base + (1 if i < extra else 0)
        bounds.append((lo, hi))
        lo = hi
    return bounds


def sample_frames(n_frames: int, n: int, seed: int | np.random.Generator = 0) -> list[int]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [int(rng.integers(lo, hi)) for lo, hi in partition_bounds(n_frames, n)]


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
    return np.array(centers, dtype=float)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int) -> tuple[np.ndarray, float]:
    labels = None
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(len(centers)):
            members = x[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    labels = d2.argmin(axis=1)
    return labels, float(d2[np.arange(len(x)), labels].sum())


def canonicalize(labels: Sequence[int]) -> np.ndarray:
    """Relabel clusters in order of first occurrence."""
    mapping: dict[int, int] = {}
    out = np.empty(len(labels), dtype=int)
    for i, lab in enumerate(labels):
        out[i] = mapping.setdefault(int(lab), len(mapping))
    return out


def kmeans_labels(points, k: int, cfg: AcpConfig = AcpConfig(),
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Best-of-restarts Lloyd clustering with k-means++ seeding."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < k:
        raise ValueError(f"need at least {k} distinct points, found {n_distinct}")
    if k == 1:
        return np.zeros(len(x), dtype=int)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    best, best_wcss = None, np.inf
    for _ in range(cfg.kmeans_restarts):
        labels, wcss = _lloyd(x, _kmeanspp(x, k, rng), cfg.kmeans_max_iters)
        if wcss < best_wcss - 1e-12:
            best, best_wcss = labels, wcss
    return canonicalize(best)


def _normalize(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero feature vector cannot be normalized")
    return f / norms[:, None], norms


def _contrast_terms(batch: ContrastBatch):
    u, norms = _normalize(batch.features)
    logits = (u @ u.T) / batch.temperature
    same = batch.labels[:, None] == batch.labels[None, :]
    pos = same & ~np.eye(len(u), dtype=bool)
    neg = ~same
    n_c = int(pos.sum())
    if n_c == 0:
        raise ValueError("degenerate contrast batch: no positive pair")
    lse_neg = logsumexp(np.where(neg, logits, -np.inf), axis=1)
    # log of the denominator for anchor i and positive j
    log_denom = np.logaddexp(logits, lse_neg[:, None])
    return u, norms, logits, pos, neg, n_c, lse_neg, log_denom


def infonce_loss(batch: ContrastBatch) -> float:
    _, _, logits, pos, _, n_c, _, log_denom = _contrast_terms(batch)
    return float(-(logits[pos] - log_denom[pos]).sum() / n_c)


def infonce_grad(batch: ContrastBatch) -> np.ndarray:
    """Gradient of the loss with respect to the unnormalized features."""
    u, norms, logits, pos, neg, n_c, lse_neg, log_denom = _contrast_terms(batch)
    q = np.where(pos, np.exp(np.where(pos, logits - log_denom, 0.0)), 0.0)
    finite = np.isfinite(lse_neg)
    safe_lse = np.where(finite, lse_neg, 0.0)[:, None]
    # sum over positives j of exp(lse_neg_i - log_denom_ij); every term is <= 1
    weight = np.where(pos, np.exp(np.where(pos, safe_lse - log_denom, 0.0)), 0.0).sum(axis=1, keepdims=True)
    neg_share = np.where(neg & finite[:, None], np.exp(np.where(neg, logits - safe_lse, 0.0)), 0.0)
    # dL/dlogit[a, b] for anchor a and partner b
    g = (np.where(pos, q - 1.0, 0.0) + neg_share * weight) / n_c
    grad_u = (g + g.T) @ u / batch.temperature
    radial = (grad_u * u).sum(axis=1, keepdims=True)
    return (grad_u - radial * u) / norms[:, None]


@dataclass
class AcpLosses:
    l_conc: float
    l_conf: float

    @property
    def l_acp(self) -> float:
        return self.l_conc + self.l_conf


def acp_losses(video_features: Sequence[np.ndarray], cfg: AcpConfig = AcpConfig(),
               coarse_labels: Optional[Sequence[Sequence[int]]] = None,
               fine_labels: Optional[Sequence[int]] = None) -> AcpLosses:
    """Coarse (per video) and fine (whole batch) contrast losses.

    ``video_features`` holds each video's already-sampled frame features
    (N x D). Supplying labels skips the corresponding clustering step, which
    is how ground-truth or pseudo action labels are used when fine-tuning.
    """
    if len(video_features) < 2:
        raise ValueError("fine contrast needs at least two videos")
    rng = np.random.default_rng(cfg.seed)
    feats = [np.atleast_2d(np.asarray(v, dtype=float)) for v in video_features]

    conc = []
    for i, f in enumerate(feats):
        labels = coarse_labels[i] if coarse_labels is not None else kmeans_labels(f, 2, cfg, rng)
        conc.append(infonce_loss(ContrastBatch(f, labels, cfg.temperature, "coarse")))

    stacked = np.vstack(feats)
    labels = fine_labels if fine_labels is not None else kmeans_labels(stacked, cfg.fine_clusters_b, cfg, rng)
    conf = infonce_loss(ContrastBatch(stacked, labels, cfg.temperature, "fine"))
    return AcpLosses(float(np.mean(conc)), conf)


def sample_video_frames(frame_features: np.ndarray, cfg: AcpConfig, rng: np.random.Generator) -> np.ndarray:
    """Pick one frame per partition from a T x D frame-feature matrix."""
    t = len(frame_features)
    n = min(cfg.partitions_n, t)
    return frame_features[sample_frames(t, n, rng)]
