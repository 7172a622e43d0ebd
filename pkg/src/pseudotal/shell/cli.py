"""Command-line entry point: one subcommand per pipeline step.

Exit codes: 0 success, 1 computation error, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .. import acp as acp_mod
from ..evalsuite import ap_rows_csv, ap_table, mean_ap, pseudo_label_quality, summary
from ..icd import DiscriminatorModel, build_pair_sets, pair_accuracy, train
from ..simharness import corrupt_predictions, generate_world, segment_feature
from . import formats as fm
from .config import RunConfig, config_to_dict, load_config
from .pipeline import (
    TAU_ICD_SWEEP, SIGMA_ICD_SWEEP, labeled_bank, parallel_map, refine_all, run_benchmark, score_instances,
    select_all,
)

log = logging.getLogger("pseudotal")

EXIT_OK, EXIT_COMPUTE, EXIT_IO = 0, 1, 2


class _Out:
    """Summary printer honoring --json."""

    def __init__(self, as_json: bool, stream=None):
        self.as_json = as_json
        self.stream = stream or sys.stdout

    def emit(self, data: dict, table: Callable[[dict], str]) -> None:
        self.stream.write(fm.dumps(data) if self.as_json else table(data))
        self.stream.flush()


def _rows(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _mkparent(path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _labeled_ids(ann: fm.AnnotationSet) -> list[str]:
    """Videos flagged as labeled; without subset markers every video counts."""
    if any(v.subset for v in ann.videos.values()):
        return ann.video_ids("labeled")
    return ann.video_ids()


def _check_classes(classes: Sequence[str], ann: fm.AnnotationSet, source: str) -> None:
    if list(classes) != list(ann.classes):
        raise fm.FormatError(f"{source}: class list does not match the annotation file")


# --- subcommands ---------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig, out: _Out) -> int:
    root = Path(args.out)
    (root / "features").mkdir(parents=True, exist_ok=True)
    world = generate_world(cfg.world)
    sim = corrupt_predictions(world, cfg.noise)

    videos = {v.video_id: fm.VideoInfo(v.duration, v.fps, list(v.annotations), "labeled" if v.labeled else "unlabeled")
              for v in world.videos}
    fm.write_annotations(root / "annotations.json", fm.AnnotationSet(world.class_names, videos))
    for vid, frames in world.frame_features.items():
        fm.write_features(fm.feature_path(root / "features", vid), frames)
    fm.write_json(root / "predictions.json",
                  fm.predictions_to_json(world.class_names, {v: (s.frame_times, s.predictions) for v, s in sim.items()}))
    fm.write_json(root / "truth.json", fm.truth_to_json(world.class_names, {v: s.injections for v, s in sim.items()}))

    kinds = Counter(j.kind for s in sim.values() for j in s.injections)
    data = {
        "videos": len(world.videos),
        "labeled_videos": len(world.labeled_videos),
        "instances": sum(len(v.annotations) for v in world.videos),
        "injections": dict(sorted(kinds.items())),
    }
    out.emit(data, lambda d: _rows(["videos", "labeled", "instances", "ambiguous", "demoted", "flipped"],
                                   [[d["videos"], d["labeled_videos"], d["instances"],
                                     *(d["injections"].get(k, 0) for k in ("ambiguous", "demoted", "flipped"))]]))
    return EXIT_OK


def cmd_select(args, cfg: RunConfig, out: _Out) -> int:
    ann = fm.read_annotations(args.annotations)
    classes, preds = fm.read_predictions(args.predictions)
    _check_classes(classes, ann, args.predictions)
    fixed = args.fixed_tau_pos if args.fixed_tau_pos is not None else cfg.run.fixed_tau_pos
    fixed = None if fixed is None or fixed < 0 else fixed
    tally: Counter = Counter()
    sets = select_all(preds, cfg.selection, cfg.scoring, fixed, args.workers, tally)
    provenance = {
        "threshold": "dynamic" if fixed is None else "fixed",
        "selection": config_to_dict(cfg)["selection"],
        "scoring": config_to_dict(cfg)["scoring"],
    }
    if fixed is not None:
        provenance["fixed_tau_pos"] = fixed
    fm.write_json(_mkparent(args.out), fm.pseudo_to_json(classes, sets, provenance))

    data = {
        "videos": len(sets),
        "positives": sum(len(s.positives) for s in sets.values()),
        "candidates": sum(len(s.candidates) for s in sets.values()),
        "rejected": sum(len(s.rejected) for s in sets.values()),
        "mean_tau_pos": float(np.mean([s.tau_pos for s in sets.values()])) if sets else 0.0,
        "dropped_zero_length": int(tally.get("dropped_zero_length", 0)),
    }
    out.emit(data, lambda d: _rows(list(d), [list(d.values())]))
    return EXIT_OK


def _instance_features(ann: fm.AnnotationSet, frames: dict[str, np.ndarray], ids: Sequence[str]):
    return [segment_feature(frames[v], a.segment, ann.videos[v].fps, a.class_index, v)
            for v in ids for a in ann.videos[v].annotations]


def cmd_icd_train(args, cfg: RunConfig, out: _Out) -> int:
    ann = fm.read_annotations(args.annotations)
    ids = _labeled_ids(ann)
    frames = fm.read_feature_dir(args.features, ids)
    feats = _instance_features(ann, frames, ids)
    model = train([feats], cfg.icd)
    model.save(_mkparent(args.out))
    data = {
        "instances": len(feats),
        "epochs": cfg.icd.epochs,
        "final_loss": float(model.loss_curve[-1]) if len(model.loss_curve) else float("nan"),
        "train_pair_accuracy": pair_accuracy(model, feats, build_pair_sets(feats, cfg.icd, np.random.default_rng(cfg.icd.seed))),
    }
    out.emit(data, lambda d: _rows(list(d), [list(d.values())]))
    return EXIT_OK


def cmd_refine(args, cfg: RunConfig, out: _Out) -> int:
    ann = fm.read_annotations(args.annotations)
    classes, sets, provenance = fm.read_pseudo(args.pseudo)
    _check_classes(classes, ann, args.pseudo)
    try:
        model = DiscriminatorModel.load(args.model)
    except ValueError as e:
        raise fm.FormatError(str(e)) from e
    missing = sorted(set(sets) - set(ann.videos))
    if missing:
        raise fm.FormatError(f"{args.pseudo}: video {missing[0]!r} absent from {args.annotations}")
    labeled = _labeled_ids(ann)
    ids = sorted(set(sets) | set(labeled))
    frames = dict(zip(ids, parallel_map(lambda v: fm.read_features(fm.feature_path(args.features, v)), ids,
                                        args.workers)))
    bank = labeled_bank(_instance_features(ann, frames, labeled))
    fps = {v: ann.videos[v].fps for v in ids}
    scored = score_instances(model, sets, frames, fps, bank, cfg.icd.max_labeled)
    eap, mpp = not args.mpp_only, not args.eap_only
    refined = refine_all(sets, scored, cfg.icd, eap, mpp)
    provenance = dict(provenance)
    provenance["refinement"] = {"eap": eap, "mpp": mpp, "tau_icd": cfg.icd.tau_icd, "sigma_icd": cfg.icd.sigma_icd}
    fm.write_json(_mkparent(args.out), fm.pseudo_to_json(classes, refined, provenance))

    # count only the entries this pass appended
    actions = Counter(e.action for v, s in refined.items() for e in s.refinement_log[len(sets[v].refinement_log):])
    data = {
        "positives_before": sum(len(s.positives) for s in sets.values()),
        "positives_after": sum(len(s.positives) for s in refined.values()),
        "eap_removed": actions.get("eap_removed", 0),
        "mpp_promoted": actions.get("mpp_promoted", 0),
        "unscorable": actions.get("unscorable", 0),
    }
    out.emit(data, lambda d: _rows(list(d), [list(d.values())]))
    return EXIT_OK


def _feature_ids(directory: str | Path) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise fm.FormatError(f"{d}: no such directory")
    ids = sorted(p.stem for p in d.glob("*.aplf"))
    if not ids:
        raise fm.FormatError(f"{d}: no .aplf feature files")
    return ids


def _acp_batches(ids: Sequence[str], size: int) -> list[list[str]]:
    return [list(ids[i:i + size]) for i in range(0, len(ids), size)]


def _acp_labels(directory, cfg: RunConfig, workers: int) -> list[dict]:
    ids = _feature_ids(directory)
    frames = dict(zip(ids, parallel_map(lambda v: fm.read_features(fm.feature_path(directory, v)), ids, workers)))
    rng = np.random.default_rng(cfg.acp.seed)
    batches = []
    for batch in _acp_batches(ids, cfg.acp.batch_videos):
        picks = {}
        for v in batch:
            t = len(frames[v])
            picks[v] = acp_mod.sample_frames(t, min(cfg.acp.partitions_n, t), rng)
        coarse = {v: acp_mod.kmeans_labels(frames[v][picks[v]], 2, cfg.acp, rng).tolist() for v in batch}
        stacked = np.vstack([frames[v][picks[v]] for v in batch])
        fine = acp_mod.kmeans_labels(stacked, cfg.acp.fine_clusters_b, cfg.acp, rng).tolist()
        fine_by, at = {}, 0
        for v in batch:
            fine_by[v] = fine[at:at + len(picks[v])]
            at += len(picks[v])
        batches.append({"videos": batch, "frames": picks, "coarse": coarse, "fine": fine_by})
    return batches


def cmd_acp_labels(args, cfg: RunConfig, out: _Out) -> int:
    batches = _acp_labels(args.features, cfg, args.workers)
    fm.write_json(_mkparent(args.out), {"batches": batches})
    data = {"batches": len(batches), "videos": sum(len(b["videos"]) for b in batches)}
    out.emit(data, lambda d: _rows(list(d), [list(d.values())]))
    return EXIT_OK


def cmd_acp_loss(args, cfg: RunConfig, out: _Out) -> int:
    if args.labels:
        batches = fm._require(fm.read_json(args.labels), "batches", str(args.labels), list)
    else:
        batches = _acp_labels(args.features, cfg, args.workers)
    rows = []
    for i, b in enumerate(batches):
        where = f"{args.labels or 'labels'}.batches[{i}]"
        vids = fm._require(b, "videos", where, list)
        if len(vids) < 2:
            log.warning("batch %d holds a single video; fine contrast skipped", i)
            continue
        feats, coarse, fine = [], [], []
        for v in vids:
            frames = fm.read_features(fm.feature_path(args.features, v))
            idx = fm._require(b["frames"], v, f"{where}.frames", list)
            if any(not 0 <= j < len(frames) for j in idx):
                raise fm.FormatError(f"{where}.frames[{v!r}]: frame index out of range")
            feats.append(frames[idx])
            coarse.append(fm._require(b["coarse"], v, f"{where}.coarse", list))
            fine.extend(fm._require(b["fine"], v, f"{where}.fine", list))
        losses = acp_mod.acp_losses(feats, cfg.acp, coarse, fine)
        rows.append({"batch": i, "l_conc": losses.l_conc, "l_conf": losses.l_conf, "l_acp": losses.l_acp})
    if not rows:
        raise ValueError("no batch holds two or more videos")
    data = {
        "batches": rows,
        "mean": {k: float(np.mean([r[k] for r in rows])) for k in ("l_conc", "l_conf", "l_acp")},
        "temperature": cfg.acp.temperature,
    }
    if args.out:
        fm.write_json(_mkparent(args.out), data)
    out.emit(data, lambda d: _rows(["l_conc", "l_conf", "l_acp"], [[d["mean"][k] for k in ("l_conc", "l_conf", "l_acp")]]))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, out: _Out) -> int:
    ann = fm.read_annotations(args.annotations)
    classes, dets = fm.read_detections(args.predictions)
    _check_classes(classes, ann, args.predictions)
    missing = sorted(set(dets) - set(ann.videos))
    if missing:
        raise fm.FormatError(f"{args.predictions}: video {missing[0]!r} absent from {args.annotations}")
    # ground truth restricted to the videos the prediction file covers
    gts = ann.instances(dets)
    preds = [i for v in sorted(dets) for i in dets[v]]
    rows = ap_table(preds, gts, cfg.eval)
    per_thr, avg = mean_ap(preds, gts, cfg.eval)
    quality = pseudo_label_quality(preds, gts, cfg.eval)
    data = summary(per_thr, avg, quality)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    (root / "ap.csv").write_text(ap_rows_csv(rows, classes), encoding="utf-8")
    fm.write_json(root / "summary.json", data)
    out.emit(data, lambda d: _rows(["tIoU", "mAP"], [[k, v] for k, v in d["map"].items()] + [["avg", d["avg"]]])
             + _rows(["class_acc", "avg_tiou", "pos_acc", "n_pseudo"],
                     [[d["quality"][k] for k in ("class_acc", "avg_tiou", "pos_acc", "n_pseudo")]]))
    return EXIT_OK


def _ablation(cfg: RunConfig, n_seeds: int, workers: int) -> dict:
    seeds = [cfg.world.seed + i for i in range(n_seeds)]
    runs = parallel_map(lambda s: run_benchmark(s, cfg.world, cfg.noise, cfg.selection, cfg.scoring, cfg.icd,
                                                cfg.eval), seeds, workers)
    variants = list(runs[0].pos_acc)
    acc = {v: np.array([r.pos_acc[v] for r in runs]) for v in variants}

    def mean_se(x):
        return {"mean": float(np.mean(x)), "se": float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0}

    diff = acc["dynamic"] - acc["fixed"]
    best_single = np.maximum(acc["eap"], acc["mpp"])
    ordered = (acc["eap+mpp"] >= best_single) & (best_single >= acc["dynamic"])
    rates = lambda name: [getattr(r, name) for r in runs]
    return {
        "seeds": seeds,
        "pos_acc": {v: {**mean_se(acc[v]), "per_seed": acc[v].tolist()} for v in variants},
        "threshold": {"dynamic_minus_fixed": mean_se(diff),
                      "dynamic_beats_fixed": bool(diff.mean() > 0 and diff.mean() > 2 * mean_se(diff)["se"])},
        "refinement": {
            "ordered_seeds": int(ordered.sum()),
            "eap_removal_rate": float(np.nanmean(rates("eap_removal_rate"))),
            "mpp_recovery_rate": float(np.nanmean(rates("mpp_recovery_rate"))),
            "ambiguous_positives": int(sum(rates("n_ambiguous_positive"))),
            "demoted_candidates": int(sum(rates("n_demoted_candidate"))),
        },
        "sweeps": {
            "tau_icd": {f"{t:.1f}": float(np.mean([r.tau_sweep[t] for r in runs])) for t in TAU_ICD_SWEEP},
            "sigma_icd": {f"{s:.1f}": float(np.mean([r.sigma_sweep[s] for r in runs])) for s in SIGMA_ICD_SWEEP},
        },
    }


def _ablation_table(d: dict) -> str:
    text = _rows(["variant", "pos_acc", "se"], [[v, x["mean"], x["se"]] for v, x in d["pos_acc"].items()])
    t = d["threshold"]["dynamic_minus_fixed"]
    text += f"dynamic - fixed: {t['mean']:.4f} (se {t['se']:.4f})\n"
    r = d["refinement"]
    text += (f"ordered seeds: {r['ordered_seeds']}/{len(d['seeds'])}  EAP removal: {r['eap_removal_rate']:.3f}  "
             f"MPP recovery: {r['mpp_recovery_rate']:.3f}\n")
    for name, sweep in d["sweeps"].items():
        text += f"{name}: " + "  ".join(f"{k}={v:.4f}" for k, v in sweep.items()) + "\n"
    return text


def cmd_report(args, cfg: RunConfig, out: _Out) -> int:
    data: dict = {}
    if args.runs:
        runs = {}
        for i, spec in enumerate(args.runs):
            label, _, path = spec.rpartition("=") if "=" in spec else (Path(spec).parent.name or f"run{i}", "", spec)
            s = fm.read_json(path)
            fm._require(s, "avg", str(path))
            if label in runs:
                raise fm.FormatError(f"duplicate run label {label!r}")
            runs[label] = {"avg_map": float(s["avg"]), "map": s.get("map", {}), "quality": s.get("quality", {})}
        data["runs"] = runs
    if args.ablation:
        seeds = args.seeds if args.seeds is not None else cfg.run.ablation_seeds
        data["ablation"] = _ablation(cfg, seeds, args.workers)
    if not data:
        raise fm.FormatError("report needs --run summaries and/or --ablation")
    if args.out:
        fm.write_json(_mkparent(args.out), data)

    def table(d):
        text = ""
        if "runs" in d:
            text += _rows(["run", "avg_mAP", "pos_acc", "class_acc", "avg_tiou"],
                          [[k, r["avg_map"], *(r["quality"].get(q, float("nan")) for q in ("pos_acc", "class_acc", "avg_tiou"))]
                           for k, r in d["runs"].items()])
        if "ablation" in d:
            text += _ablation_table(d["ablation"])
        return text

    out.emit(data, table)
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (section.key = value)")
    common.add_argument("--json", action="store_true", help="print the summary as JSON")
    common.add_argument("--workers", type=int, default=1, help="worker threads for per-video work")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pseudotal", description="Pseudo-label selection and refinement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a seeded synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select", parents=[common], help="tier frame predictions into pseudo labels")
    p.add_argument("--annotations", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fixed-tau-pos", type=float, help="use a fixed positive threshold instead of the dynamic one")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("icd-train", parents=[common], help="train the instance discriminator on labeled videos")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", required=True, help="directory of .aplf files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_icd_train)

    p = sub.add_parser("refine", parents=[common], help="refine pseudo labels with the discriminator")
    p.add_argument("--pseudo", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    only = p.add_mutually_exclusive_group()
    only.add_argument("--eap-only", action="store_true")
    only.add_argument("--mpp-only", action="store_true")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("acp-labels", parents=[common], help="cluster sampled frames into contrast labels")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_acp_labels)

    p = sub.add_parser("acp-loss", parents=[common], help="coarse and fine contrastive losses")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", help="output of acp-labels; clustered on the fly when omitted")
    p.add_argument("--out")
    p.set_defaults(func=cmd_acp_loss)

    p = sub.add_parser("eval", parents=[common], help="mAP and pseudo-label quality")
    p.add_argument("--predictions", required=True, help="pseudo-label, detection or annotation file")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="directory for ap.csv and summary.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="aggregate runs and ablations")
    p.add_argument("--run", dest="runs", action="append", metavar="[LABEL=]SUMMARY",
                   help="eval summary.json to include; repeatable")
    p.add_argument("--ablation", action="store_true", help="run the seeded ablation benchmark")
    p.add_argument("--seeds", type=int, help="number of ablation seeds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ValueError("--workers must be at least 1")
        cfg = load_config(args.config)
        return args.func(args, cfg, _Out(args.json))
    except (fm.FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001 - every other failure is a computation error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
