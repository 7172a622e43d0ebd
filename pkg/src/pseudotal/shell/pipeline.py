"""Composable end-to-end steps shared by the CLI and the ablation runner."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from ..evalsuite import EvalConfig, pseudo_label_quality
from ..geometry import Segment
from ..icd import DiscriminatorModel, IcdConfig, InstanceFeature, max_pool, refine, similarity_scores, train
from ..quality import FramePredictions, ScoringConfig
from ..selection import Instance, PseudoLabelSet, SelectionConfig, select_pseudo_labels
from ..simharness import NoiseModel, SimVideo, World, WorldConfig, corrupt_predictions, generate_world, segment_feature

log = logging.getLogger(__name__)


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Order-preserving map; results never depend on the worker count."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def select_all(videos: Mapping[str, tuple[np.ndarray, FramePredictions]],
               sel: SelectionConfig = SelectionConfig(), scoring: ScoringConfig = ScoringConfig(),
               fixed_tau_pos: Optional[float] = None, workers: int = 1,
               tally: Optional[Counter] = None) -> dict[str, PseudoLabelSet]:
    ids = sorted(videos)

    def one(vid):
        local = Counter()
        times, preds = videos[vid]
        return select_pseudo_labels(preds, times, vid, sel, scoring, fixed_tau_pos, local), local

    results = parallel_map(one, ids, workers)
    if tally is not None:
        for _, local in results:
            tally.update(local)
    return {vid: pls for vid, (pls, _) in zip(ids, results)}


def labeled_bank(features: Iterable[InstanceFeature]) -> dict[int, np.ndarray]:
    """Pooled labeled features stacked per class."""
    by_class: dict[int, list[np.ndarray]] = defaultdict(list)
    for f in features:
        by_class[f.class_index].append(max_pool(f))
    return {k: np.stack(v) for k, v in by_class.items()}


@dataclass
class ScoreResult:
    scores: dict[str, float] = field(default_factory=dict)
    unscorable: list[str] = field(default_factory=list)


def score_instances(model: DiscriminatorModel, sets: Mapping[str, PseudoLabelSet],
                    frames: Mapping[str, np.ndarray], fps: Mapping[str, float],
                    bank: Mapping[int, np.ndarray], cap: int = 0) -> ScoreResult:
    """Similarity of every positive and candidate against its labeled class bank."""
    out = ScoreResult()
    by_class: dict[int, list[tuple[str, np.ndarray]]] = defaultdict(list)
    for vid in sorted(sets):
        pls = sets[vid]
        for inst in [*pls.positives, *pls.candidates]:
            if inst.class_index not in bank:
                out.unscorable.append(inst.key)
                continue
            feat = segment_feature(frames[vid], inst.segment, fps[vid], inst.class_index, vid)
            by_class[inst.class_index].append((inst.key, max_pool(feat)))
    for k in sorted(by_class):
        keys = [key for key, _ in by_class[k]]
        labeled = bank[k][:cap] if cap else bank[k]
        sims = similarity_scores(model, np.stack([v for _, v in by_class[k]]), labeled)
        out.scores.update(zip(keys, sims.tolist()))
    return out


def refine_all(sets: Mapping[str, PseudoLabelSet], scored: ScoreResult, cfg: IcdConfig,
               eap: bool = True, mpp: bool = True) -> dict[str, PseudoLabelSet]:
    return {vid: refine(pls, scored.scores, cfg, eap, mpp, scored.unscorable) for vid, pls in sets.items()}


def positives(sets: Mapping[str, PseudoLabelSet]) -> list[Instance]:
    return [i for vid in sorted(sets) for i in sets[vid].positives]


# --- seeded ablation benchmark -------------------------------------------------

TAU_ICD_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5)
SIGMA_ICD_SWEEP = (0.5, 0.6, 0.7, 0.8, 0.9)
FIXED_TAU_POS = 0.3


@dataclass
class BenchRun:
    seed: int
    pos_acc: dict[str, float]
    quality: dict[str, dict]
    tau_sweep: dict[float, float]
    sigma_sweep: dict[float, float]
    eap_removal_rate: float
    mpp_recovery_rate: float
    n_ambiguous_positive: int
    n_demoted_candidate: int
    icd_pair_accuracy: float = float("nan")


def gt_instances(world: World, labeled: bool = False) -> list[Instance]:
    return [a for v in world.videos if v.labeled == labeled for a in v.annotations]


def train_world_icd(world: World, cfg: IcdConfig) -> DiscriminatorModel:
    return train([world.instance_features(labeled=True)], cfg)


def _with_thresholds(cfg: IcdConfig, tau: Optional[float] = None, sigma: Optional[float] = None) -> IcdConfig:
    from dataclasses import replace

    tau = cfg.tau_icd if tau is None else tau
    sigma = cfg.sigma_icd if sigma is None else sigma
    # keep the pair valid when a sweep crosses the other threshold
    if tau >= sigma:
        return replace(cfg, tau_icd=tau, sigma_icd=max(sigma, min(1.0, tau + 1e-9)))
    return replace(cfg, tau_icd=tau, sigma_icd=sigma)


def run_benchmark(seed: int, world_cfg: WorldConfig = WorldConfig(), noise: NoiseModel = NoiseModel(),
                  sel: SelectionConfig = SelectionConfig(), scoring: ScoringConfig = ScoringConfig(),
                  icd_cfg: IcdConfig = IcdConfig(), eval_cfg: EvalConfig = EvalConfig(),
                  sweeps: bool = True) -> BenchRun:
    """One seeded world through every selection and refinement variant."""
    from dataclasses import replace

    world = generate_world(replace(world_cfg, seed=seed))
    sim = corrupt_predictions(world, replace(noise, seed=seed))
    gts = gt_instances(world, labeled=False)
    videos = {vid: (s.frame_times, s.predictions) for vid, s in sim.items()}

    def acc(sets):
        return pseudo_label_quality(positives(sets), gts, eval_cfg)

    fixed = select_all(videos, sel, scoring, fixed_tau_pos=FIXED_TAU_POS)
    dynamic = select_all(videos, sel, scoring)

    model = train_world_icd(world, replace(icd_cfg, seed=seed))
    frames = world.frame_features
    fps = {v.video_id: v.fps for v in world.videos}
    bank = labeled_bank(world.instance_features(labeled=True))
    scored = score_instances(model, dynamic, frames, fps, bank, icd_cfg.max_labeled)

    variants = {
        "fixed": fixed,
        "dynamic": dynamic,
        "eap": refine_all(dynamic, scored, icd_cfg, eap=True, mpp=False),
        "mpp": refine_all(dynamic, scored, icd_cfg, eap=False, mpp=True),
        "eap+mpp": refine_all(dynamic, scored, icd_cfg, eap=True, mpp=True),
    }
    reports = {name: acc(sets) for name, sets in variants.items()}

    tau_sweep, sigma_sweep = {}, {}
    if sweeps:
        for tau in TAU_ICD_SWEEP:
            cfg = _with_thresholds(icd_cfg, tau=tau)
            tau_sweep[tau] = acc(refine_all(dynamic, scored, cfg)).pos_acc
        for sigma in SIGMA_ICD_SWEEP:
            cfg = _with_thresholds(icd_cfg, sigma=sigma)
            sigma_sweep[sigma] = acc(refine_all(dynamic, scored, cfg)).pos_acc

    amb_pos = amb_removed = dem_cand = dem_promoted = 0
    for vid, pls in dynamic.items():
        for inst in pls.positives:
            if sim[vid].tag(inst) == "ambiguous":
                amb_pos += 1
                amb_removed += scored.scores.get(inst.key, 1.0) < icd_cfg.tau_icd
        for inst in pls.candidates:
            if sim[vid].tag(inst) == "demoted":
                dem_cand += 1
                dem_promoted += scored.scores.get(inst.key, 0.0) > icd_cfg.sigma_icd

    return BenchRun(
        seed=seed,
        pos_acc={name: r.pos_acc for name, r in reports.items()},
        quality={name: r.as_dict() for name, r in reports.items()},
        tau_sweep=tau_sweep,
        sigma_sweep=sigma_sweep,
        eap_removal_rate=amb_removed / amb_pos if amb_pos else float("nan"),
        mpp_recovery_rate=dem_promoted / dem_cand if dem_cand else float("nan"),
        n_ambiguous_positive=amb_pos,
        n_demoted_candidate=dem_cand,
    )
