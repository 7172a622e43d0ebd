"""Readers and writers for every on-disk artifact.

JSON output is canonical: sorted keys, floats at six decimals, two-space
indentation for objects, scalar lists kept on one line. Reading a file and
writing it back reproduces the same bytes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from ..geometry import Segment
from ..quality import FramePredictions
from ..selection import Instance, LogEntry, PseudoLabelSet, rank_key

FEATURE_MAGIC = b"APLF"
TIERS = ("positives", "candidates", "rejected")


class FormatError(Exception):
    """Malformed or unreadable input; maps to exit code 2."""


# --- canonical JSON ------------------------------------------------------------

def _scalar(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return "null"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise FormatError(f"non-finite float {x} cannot be written")
        text = f"{x:.6f}"
        return "0.000000" if text == "-0.000000" else text
    if isinstance(x, str):
        return json.dumps(x, ensure_ascii=False)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _emit(x: Any, indent: int) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(x, np.ndarray):
        x = x.tolist()
    if isinstance(x, Mapping):
        if not x:
            return "{}"
        items = [f"{inner}{json.dumps(str(k), ensure_ascii=False)}: {_emit(x[k], indent + 1)}"
                 for k in sorted(x, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(x, (list, tuple)):
        if not x:
            return "[]"
        if all(not isinstance(v, (Mapping, list, tuple, np.ndarray)) for v in x):
            return "[" + ", ".join(_scalar(v) for v in x) + "]"
        return "[\n" + ",\n".join(inner + _emit(v, indent + 1) for v in x) + "\n" + pad + "]"
    return _scalar(x)


def dumps(obj: Any) -> str:
    return _emit(obj, 0) + "\n"


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path: str | Path) -> Any:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"{p}: no such file")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{p}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e


def _require(obj: Mapping, key: str, where: str, kind: type | tuple = object) -> Any:
    if not isinstance(obj, Mapping) or key not in obj:
        raise FormatError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is not object and not isinstance(value, kind):
        raise FormatError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}")
    return value


# --- annotations ---------------------------------------------------------------

@dataclass
class VideoInfo:
    duration: float
    fps: float
    annotations: list[Instance] = field(default_factory=list)
    subset: str = ""


@dataclass
class AnnotationSet:
    classes: list[str]
    videos: dict[str, VideoInfo]

    def class_index(self, label: str) -> int:
        return self.classes.index(label)

    def video_ids(self, subset: Optional[str] = None) -> list[str]:
        return [v for v in sorted(self.videos) if subset is None or self.videos[v].subset == subset]

    def instances(self, video_ids: Optional[Iterable[str]] = None) -> list[Instance]:
        ids = sorted(self.videos) if video_ids is None else sorted(video_ids)
        return [a for v in ids if v in self.videos for a in self.videos[v].annotations]


def annotations_to_json(ann: AnnotationSet) -> dict:
    videos = {}
    for vid, info in ann.videos.items():
        entry = {
            "duration": float(info.duration),
            "fps": float(info.fps),
            "annotations": [{"segment": [float(a.segment.start), float(a.segment.end)], "label": ann.classes[a.class_index]}
                            for a in sorted(info.annotations, key=lambda a: (a.segment.start, a.class_index))],
        }
        if info.subset:
            entry["subset"] = info.subset
        videos[vid] = entry
    return {"classes": list(ann.classes), "videos": videos}


def _segment(value: Any, where: str) -> Segment:
    if not isinstance(value, list) or len(value) != 2:
        raise FormatError(f"{where}: segment must be [start, end]")
    try:
        return Segment(float(value[0]), float(value[1]))
    except (TypeError, ValueError) as e:
        raise FormatError(f"{where}: {e}") from e


def annotations_from_json(obj: Any, where: str = "annotations") -> AnnotationSet:
    classes = _require(obj, "classes", where, list)
    if not classes or len(set(classes)) != len(classes) or not all(isinstance(c, str) for c in classes):
        raise FormatError(f"{where}.classes: need distinct class-name strings")
    videos = {}
    for vid, entry in _require(obj, "videos", where, dict).items():
        loc = f"{where}.videos[{vid!r}]"
        duration = float(_require(entry, "duration", loc, (int, float)))
        fps = float(entry.get("fps", 1.0))
        if duration <= 0 or fps <= 0:
            raise FormatError(f"{loc}: duration and fps must be positive")
        items = []
        for i, a in enumerate(entry.get("annotations", [])):
            aloc = f"{loc}.annotations[{i}]"
            label = _require(a, "label", aloc, str)
            if label not in classes:
                raise FormatError(f"{aloc}.label: unknown class {label!r}")
            items.append(Instance(_segment(_require(a, "segment", aloc), aloc), classes.index(label), 1.0, vid))
        videos[vid] = VideoInfo(duration, fps, items, str(entry.get("subset", "")))
    return AnnotationSet(list(classes), videos)


def read_annotations(path: str | Path) -> AnnotationSet:
    return annotations_from_json(read_json(path), str(path))


def write_annotations(path: str | Path, ann: AnnotationSet) -> None:
    write_json(path, annotations_to_json(ann))


# --- frame features --------------------------------------------------------------

def feature_bytes(frames: np.ndarray) -> bytes:
    """T x D frame features as an APLF payload."""
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ValueError("features must be a T x D matrix")
    t, d = frames.shape
    return FEATURE_MAGIC + struct.pack("<II", d, t) + np.ascontiguousarray(frames).tobytes()


def write_features(path: str | Path, frames: np.ndarray) -> None:
    Path(path).write_bytes(feature_bytes(frames))


def read_features(path: str | Path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"{p}: no such file")
    raw = p.read_bytes()
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{p}: not an APLF feature file")
    d, t = struct.unpack("<II", raw[4:12])
    if len(raw) - 12 != 4 * d * t:
        raise FormatError(f"{p}: payload holds {len(raw) - 12} bytes, header implies {4 * d * t}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(t, d).astype(float)


def feature_path(directory: str | Path, video_id: str) -> Path:
    return Path(directory) / f"{video_id}.aplf"


def read_feature_dir(directory: str | Path, video_ids: Iterable[str]) -> dict[str, np.ndarray]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: no such directory")
    return {v: read_features(feature_path(d, v)) for v in video_ids}


# --- frame-level predictions -----------------------------------------------------

def predictions_to_json(classes: Sequence[str], preds: Mapping[str, tuple[np.ndarray, FramePredictions]]) -> dict:
    videos = {}
    for vid, (times, p) in preds.items():
        videos[vid] = {
            "frame_times": np.asarray(times, dtype=float),
            "cls": p.cls,
            "tiou_hat": p.tiou_hat,
            "tnd_hat": p.tnd_hat,
            "offsets": p.offsets,
        }
    return {"classes": list(classes), "videos": videos}


def predictions_from_json(obj: Any, where: str = "predictions") -> tuple[list[str], dict[str, tuple[np.ndarray, FramePredictions]]]:
    classes = _require(obj, "classes", where, list)
    out = {}
    for vid, entry in _require(obj, "videos", where, dict).items():
        loc = f"{where}.videos[{vid!r}]"
        try:
            times = np.asarray(_require(entry, "frame_times", loc, list), dtype=float)
            preds = FramePredictions(
                np.asarray(_require(entry, "cls", loc, list), dtype=float),
                np.asarray(_require(entry, "tiou_hat", loc, list), dtype=float),
                np.asarray(_require(entry, "tnd_hat", loc, list), dtype=float),
                np.asarray(_require(entry, "offsets", loc, list), dtype=float),
            )
        except ValueError as e:
            raise FormatError(f"{loc}: {e}") from e
        if len(times) != preds.n_frames:
            raise FormatError(f"{loc}.frame_times: {len(times)} times for {preds.n_frames} frames")
        if preds.n_classes != len(classes):
            raise FormatError(f"{loc}.cls: {preds.n_classes} rows for {len(classes)} classes")
        out[vid] = (times, preds)
    return list(classes), out


def read_predictions(path: str | Path):
    return predictions_from_json(read_json(path), str(path))


# --- pseudo-label sets -------------------------------------------------------------

def instance_to_json(inst: Instance, classes: Sequence[str]) -> dict:
    out = {"segment": [float(inst.segment.start), float(inst.segment.end)], "label": classes[inst.class_index],
           "score": float(inst.score)}
    if inst.source_frame is not None:
        out["source_frame"] = int(inst.source_frame)
    return out


def instance_from_json(obj: Any, classes: Sequence[str], video_id: str, where: str) -> Instance:
    label = _require(obj, "label", where, str)
    if label not in classes:
        raise FormatError(f"{where}.label: unknown class {label!r}")
    score = float(obj.get("score", 1.0))
    if not 0.0 <= score <= 1.0:
        raise FormatError(f"{where}.score: {score} outside [0, 1]")
    frame = obj.get("source_frame")
    return Instance(_segment(_require(obj, "segment", where), where), classes.index(label), score,
                    video_id, None if frame is None else int(frame))


def pseudo_to_json(classes: Sequence[str], sets: Mapping[str, PseudoLabelSet],
                   provenance: Optional[Mapping] = None) -> dict:
    videos = {}
    for vid, pls in sets.items():
        entry = {tier: [instance_to_json(i, classes) for i in sorted(getattr(pls, tier), key=rank_key)]
                 for tier in TIERS}
        entry.update(
            tau_pos=pls.tau_pos,
            tau_neg=pls.tau_neg,
            flags=sorted(pls.flags),
            refinement_log=[{"instance": e.instance_id, "action": e.action,
                             "similarity": e.similarity if math.isfinite(e.similarity) else None}
                            for e in pls.refinement_log],
        )
        videos[vid] = entry
    return {"classes": list(classes), "provenance": dict(provenance or {}), "videos": videos}


def pseudo_from_json(obj: Any, where: str = "pseudo") -> tuple[list[str], dict[str, PseudoLabelSet], dict]:
    classes = _require(obj, "classes", where, list)
    sets = {}
    for vid, entry in _require(obj, "videos", where, dict).items():
        loc = f"{where}.videos[{vid!r}]"
        tiers = {t: [instance_from_json(x, classes, vid, f"{loc}.{t}[{i}]")
                     for i, x in enumerate(_require(entry, t, loc, list))] for t in TIERS}
        log = []
        for i, e in enumerate(entry.get("refinement_log", [])):
            eloc = f"{loc}.refinement_log[{i}]"
            sim = _require(e, "similarity", eloc, (int, float, type(None)))
            log.append(LogEntry(_require(e, "instance", eloc, str), _require(e, "action", eloc, str),
                                float("nan") if sim is None else float(sim)))
        sets[vid] = PseudoLabelSet(tiers["positives"], tiers["candidates"], tiers["rejected"],
                                   float(_require(entry, "tau_pos", loc, (int, float))),
                                   float(_require(entry, "tau_neg", loc, (int, float))),
                                   log, list(entry.get("flags", [])))
    return list(classes), sets, dict(obj.get("provenance", {}))


def read_pseudo(path: str | Path):
    return pseudo_from_json(read_json(path), str(path))


# --- detections for evaluation ---------------------------------------------------------

def read_detections(path: str | Path) -> tuple[list[str], dict[str, list[Instance]]]:
    """Scored instances per video from any of the instance-bearing formats.

    Accepts a pseudo-label file (its positives), an annotation file (every
    instance at score 1) or a plain detection file mapping video ids to
    lists of ``{segment, label, score}``.
    """
    obj = read_json(path)
    where = str(path)
    classes = _require(obj, "classes", where, list)
    videos = _require(obj, "videos", where, dict)
    first = next(iter(videos.values()), None)
    if isinstance(first, Mapping) and "positives" in first:
        _, sets, _ = pseudo_from_json(obj, where)
        return classes, {v: list(s.positives) for v, s in sets.items()}
    if isinstance(first, Mapping):
        ann = annotations_from_json(obj, where)
        return classes, {v: list(info.annotations) for v, info in ann.videos.items()}
    out = {}
    for vid, items in videos.items():
        if not isinstance(items, list):
            raise FormatError(f"{where}.videos[{vid!r}]: expected a list of detections")
        out[vid] = [instance_from_json(x, classes, vid, f"{where}.videos[{vid!r}][{i}]")
                    for i, x in enumerate(items)]
    return classes, out


# --- simulator truth ledger ----------------------------------------------------------------

def truth_to_json(classes: Sequence[str], injections: Mapping[str, Sequence]) -> dict:
    return {
        "classes": list(classes),
        "videos": {vid: [{"kind": j.kind, "gt_index": j.gt_index, "label": classes[j.class_index],
                          "frames": list(j.frames)} for j in items]
                   for vid, items in injections.items()},
    }
