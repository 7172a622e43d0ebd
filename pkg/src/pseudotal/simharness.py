"""Seeded synthetic videos, instance features and corrupted detector outputs.

The world is a set of untrimmed videos on a 1 fps grid with non-overlapping
action instances. Frame features are a class prototype plus noise inside an
action and plain noise elsewhere, so instance similarity is controlled by
``class_prototype_separation``.

Detector outputs are built frame by frame from the ground truth and then
corrupted: boundary jitter, class flips (reported with lower confidence),
injected wrong-class detections with confident scores ("ambiguous"), and true
instances whose confidence is pushed into a low band ("demoted"). Every
injection is recorded in a per-video ledger keyed by the frames that carry
it, so refinement can be scored exactly.

Per-video generators are seeded with splitmix64(base_seed, stream, index),
which keeps each video's draws independent of how many videos exist or how
they are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Segment, frame_times, frames_in_segment, tiou, tnd
from .icd import InstanceFeature
from .quality import FramePredictions
from .selection import Instance

MASK64 = 0xFFFFFFFFFFFFFFFF

WORLD_STREAM = 1
NOISE_STREAM = 2


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, stream: int, index: int) -> int:
    return splitmix64(splitmix64(splitmix64(base & MASK64) ^ stream) ^ index)


def _rng(base: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, stream, index))


@dataclass(frozen=True)
class WorldConfig:
    n_videos: int = 200
    n_classes: int = 5
    duration_range: tuple[int, int] = (60, 120)
    instances_per_video: tuple[int, int] = (1, 4)
    instance_length: tuple[float, float] = (4.0, 12.0)
    feature_dim: int = 16
    class_prototype_separation: float = 8.0
    labeled_fraction: float = 0.1
    fps: float = 1.0
    min_gap: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.n_videos < 1 or self.feature_dim < 1:
            raise ValueError("n_videos and feature_dim must be positive")
        if self.class_prototype_separation < 0:
            raise ValueError("class_prototype_separation must be non-negative")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in [0, 1]")
        lo, hi = self.instances_per_video
        if not 1 <= lo <= hi:
            raise ValueError("instances_per_video must satisfy 1 <= lo <= hi")
        dlo, dhi = self.duration_range
        if not 0 < dlo <= dhi:
            raise ValueError("duration_range must satisfy 0 < lo <= hi")
        llo, lhi = self.instance_length
        if not 0 < llo <= lhi:
            raise ValueError("instance_length must satisfy 0 < lo <= hi")
        worst = hi * lhi + (hi + 1) * self.min_gap
        if worst > dlo:
            raise ValueError(
                f"infeasible packing: up to {hi} instances of length {lhi}s with gaps {self.min_gap}s "
                f"need {worst}s but the shortest video lasts {dlo}s"
            )


@dataclass(frozen=True)
class NoiseModel:
    boundary_jitter: float = 0.05
    class_flip_prob: float = 0.1
    score_noise_std: float = 0.05
    ambiguous_rate: float = 0.05
    missed_rate: float = 0.1
    base_confidence: float = 0.85
    flip_confidence: tuple[float, float] = (0.3, 0.6)
    demote_band: tuple[float, float] = (0.2, 0.45)
    background_max: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("class_flip_prob", "ambiguous_rate", "missed_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.boundary_jitter < 0 or self.score_noise_std < 0:
            raise ValueError("boundary_jitter and score_noise_std must be non-negative")

    @classmethod
    def zero(cls, seed: int = 0) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, seed=seed)


@dataclass
class Video:
    video_id: str
    duration: float
    fps: float
    n_frames: int
    annotations: list[Instance]
    labeled: bool


@dataclass
class World:
    config: WorldConfig
    class_names: list[str]
    prototypes: np.ndarray
    videos: list[Video]
    frame_features: dict[str, np.ndarray]  # video_id -> T x D

    def video(self, video_id: str) -> Video:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)

    @property
    def labeled_videos(self) -> list[Video]:
        return [v for v in self.videos if v.labeled]

    @property
    def unlabeled_videos(self) -> list[Video]:
        return [v for v in self.videos if not v.labeled]

    def instance_feature(self, video_id: str, segment: Segment, class_index: int) -> InstanceFeature:
        v = self.video(video_id)
        return segment_feature(self.frame_features[video_id], segment, v.fps, class_index, video_id)

    def instance_features(self, labeled: Optional[bool] = True) -> list[InstanceFeature]:
        out = []
        for v in self.videos:
            if labeled is not None and v.labeled != labeled:
                continue
            for a in v.annotations:
                out.append(self.instance_feature(v.video_id, a.segment, a.class_index))
        return out


def segment_feature(frames: np.ndarray, segment: Segment, fps: float, class_index: int,
                    video_id: str = "") -> InstanceFeature:
    """D x L feature of the frames a segment covers."""
    idx = frames_in_segment(segment, fps, len(frames))
    return InstanceFeature(frames[idx].T, class_index, video_id)


def _place_instances(rng: np.random.Generator, cfg: WorldConfig, duration: float):
    n = int(rng.integers(cfg.instances_per_video[0], cfg.instances_per_video[1] + 1))
    lengths = rng.uniform(*cfg.instance_length, size=n)
    slack = duration - lengths.sum() - (n + 1) * cfg.min_gap
    gaps = cfg.min_gap + slack * rng.dirichlet(np.ones(n + 1))
    segs, t = [], 0.0
    for i in range(n):
        t += gaps[i]
        segs.append(Segment(float(t), float(t + lengths[i])))
        t += lengths[i]
    return segs


def generate_world(cfg: WorldConfig = WorldConfig()) -> World:
    master = _rng(cfg.seed, WORLD_STREAM, MASK64)
    directions = master.normal(size=(cfg.n_classes, cfg.feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    prototypes = cfg.class_prototype_separation * directions
    n_labeled = int(round(cfg.labeled_fraction * cfg.n_videos))
    labeled = set(master.permutation(cfg.n_videos)[:n_labeled].tolist())

    videos, frames = [], {}
    for i in range(cfg.n_videos):
        rng = _rng(cfg.seed, WORLD_STREAM, i)
        vid = f"video_{i:04d}"
        duration = float(rng.integers(cfg.duration_range[0], cfg.duration_range[1] + 1))
        n_frames = int(np.floor(duration * cfg.fps))
        segs = _place_instances(rng, cfg, duration)
        classes = rng.integers(0, cfg.n_classes, size=len(segs))
        feats = rng.normal(size=(n_frames, cfg.feature_dim))
        annotations = []
        for seg, c in zip(segs, classes.tolist()):
            idx = frames_in_segment(seg, cfg.fps, n_frames)
            instance_shift = rng.normal(0.0, 0.5, size=cfg.feature_dim)
            feats[idx] += prototypes[c] + instance_shift
            annotations.append(Instance(seg, int(c), 1.0, vid))
        videos.append(Video(vid, duration, cfg.fps, n_frames, annotations, i in labeled))
        frames[vid] = feats
    names = [f"action_{k:02d}" for k in range(cfg.n_classes)]
    return World(cfg, names, prototypes, videos, frames)


@dataclass
class Injection:
    kind: str  # ambiguous | demoted | flipped
    gt_index: int
    class_index: int
    frames: list[int]


@dataclass
class SimVideo:
    video_id: str
    frame_times: np.ndarray
    predictions: FramePredictions
    oracle: list[Instance]
    injections: list[Injection] = field(default_factory=list)

    def tag(self, inst: Instance) -> Optional[str]:
        """Injection kind that produced a decoded instance, if any."""
        for inj in self.injections:
            if inst.class_index == inj.class_index and inst.source_frame in inj.frames:
                return inj.kind
        return None


def _clip01(x):
    return np.clip(x, 0.0, 1.0)


def corrupt_video(world: World, video: Video, index: int, noise: NoiseModel) -> SimVideo:
    rng = _rng(noise.seed ^ world.config.seed, NOISE_STREAM, index)
    k, t_len = world.config.n_classes, video.n_frames
    times = frame_times(t_len, video.fps)
    sd = noise.score_noise_std

    cls = rng.uniform(0.0, noise.background_max, size=(k, t_len))
    tiou_hat = rng.uniform(0.0, 0.5, size=t_len)
    tnd_hat = rng.uniform(0.0, 0.3, size=t_len)
    offsets = rng.uniform(0.5, 3.0, size=(2, t_len))
    amb_prob = 1.0 if noise.ambiguous_rate >= 0.5 else noise.ambiguous_rate / (1.0 - noise.ambiguous_rate)

    oracle, injections = [], []
    for j, gt in enumerate(video.annotations):
        seg, c = gt.segment, gt.class_index
        frames = frames_in_segment(seg, video.fps, t_len)
        flipped = rng.random() < noise.class_flip_prob
        demoted = rng.random() < noise.missed_rate and not flipped
        ambiguous = rng.random() < amb_prob and len(frames) >= 2
        others = [x for x in range(k) if x != c]
        peak = int(rng.choice(others)) if flipped else c
        amb_class = int(rng.choice(others))
        if demoted:
            conf = rng.uniform(*noise.demote_band)
        elif flipped:
            conf = rng.uniform(*noise.flip_confidence)
        else:
            conf = float(np.clip(noise.base_confidence + rng.normal(0.0, 2 * sd), 0.05, 1.0))
        amb_conf = float(np.clip(noise.base_confidence + rng.normal(0.0, 2 * sd), 0.05, 1.0))

        own = frames[0::2] if ambiguous else frames
        amb = frames[1::2] if ambiguous else frames[:0]
        jitter = noise.boundary_jitter * seg.length
        for t in frames.tolist():
            start = seg.start + rng.normal(0.0, jitter)
            end = seg.end + rng.normal(0.0, jitter)
            left, right = max(times[t] - start, 0.0), max(end - times[t], 0.0)
            offsets[:, t] = (left, right)
            if left + right > 0:
                decoded = Segment(times[t] - left, times[t] + right)
                tiou_hat[t] = _clip01(tiou(decoded, seg) + rng.normal(0.0, sd))
                tnd_hat[t] = _clip01(tnd(decoded, seg) + rng.normal(0.0, sd))
            cls[:, t] = rng.uniform(0.0, noise.background_max, size=k)
        cls[peak, own] = _clip01(conf + rng.normal(0.0, sd / 2, size=len(own)))
        if len(amb):
            cls[amb_class, amb] = _clip01(amb_conf + rng.normal(0.0, sd / 2, size=len(amb)))
            injections.append(Injection("ambiguous", j, amb_class, amb.tolist()))
        if demoted:
            injections.append(Injection("demoted", j, c, own.tolist()))
        if flipped:
            injections.append(Injection("flipped", j, peak, own.tolist()))
        oracle.append(Instance(seg, peak, float(conf), video.video_id))

    preds = FramePredictions(cls, tiou_hat, tnd_hat, offsets)
    return SimVideo(video.video_id, times, preds, oracle, injections)


def corrupt_predictions(world: World, noise: NoiseModel = NoiseModel(),
                        videos: Optional[Sequence[Video]] = None) -> dict[str, SimVideo]:
    """Corrupted detector outputs, by default for every unlabeled video."""
    index = {v.video_id: i for i, v in enumerate(world.videos)}
    chosen = world.unlabeled_videos if videos is None else videos
    return {v.video_id: corrupt_video(world, v, index[v.video_id], noise) for v in chosen}
