from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pseudotal.geometry import Segment
from pseudotal.quality import FramePredictions
from pseudotal.selection import Instance, LogEntry, PseudoLabelSet
from pseudotal.shell import formats as fm

CLASSES = ["jump", "run"]


def test_canonical_json_layout():
    text = fm.dumps({"b": [1, 2.5, True, None], "a": {"x": "s", "y": []}, "c": [[0.1], {"k": 1}]})
    assert text == (
        '{\n'
        '  "a": {\n'
        '    "x": "s",\n'
        '    "y": []\n'
        '  },\n'
        '  "b": [1, 2.500000, true, null],\n'
        '  "c": [\n'
        '    [0.100000],\n'
        '    {\n'
        '      "k": 1\n'
        '    }\n'
        '  ]\n'
        '}\n'
    )
    assert fm.dumps(-0.0000001) == "0.000000\n"
    with pytest.raises(fm.FormatError):
        fm.dumps(math.nan)


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-10 ** 6, 10 ** 6) | st.text(max_size=5)
    | st.floats(-1e6, 1e6).map(lambda x: round(x, 6)),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=4), inner, max_size=4),
    max_leaves=12,
)


@given(json_values)
def test_canonical_json_is_a_fixed_point(value):
    import json
    once = fm.dumps(value)
    assert fm.dumps(json.loads(once)) == once


def sample_annotations():
    return fm.AnnotationSet(CLASSES, {
        "v1": fm.VideoInfo(60.0, 1.0, [Instance(Segment(2.5, 8.0), 1, 1.0, "v1"), Instance(Segment(10, 20), 0, 1.0, "v1")],
                           "labeled"),
        "v2": fm.VideoInfo(90.0, 2.0, [], "unlabeled"),
    })


def test_annotation_round_trip(tmp_path):
    path = tmp_path / "a.json"
    fm.write_annotations(path, sample_annotations())
    raw = path.read_bytes()
    back = fm.read_annotations(path)
    assert back.video_ids("labeled") == ["v1"] and back.classes == CLASSES
    assert [(a.segment, a.class_index) for a in back.instances(["v1"])] == [(Segment(2.5, 8.0), 1), (Segment(10, 20), 0)]
    fm.write_annotations(tmp_path / "b.json", back)
    assert (tmp_path / "b.json").read_bytes() == raw


def test_annotation_errors_name_the_problem(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"classes": ["a"], "videos": {"v": {"duration": 5, "fps": 1, '
                   '"annotations": [{"segment": [3, 1], "label": "a"}]}}}')
    with pytest.raises(fm.FormatError, match="segment"):
        fm.read_annotations(bad)
    bad.write_text('{"classes": ["a"], "videos": {"v": {"duration": 5, "fps": 1, '
                   '"annotations": [{"segment": [0, 1], "label": "zz"}]}}}')
    with pytest.raises(fm.FormatError, match="zz"):
        fm.read_annotations(bad)
    bad.write_text("{not json")
    with pytest.raises(fm.FormatError, match="line 1"):
        fm.read_json(bad)
    with pytest.raises(fm.FormatError, match="no such file"):
        fm.read_json(tmp_path / "missing.json")


def test_feature_round_trip_and_errors(tmp_path):
    frames = np.arange(12, dtype=float).reshape(4, 3) / 7
    path = fm.feature_path(tmp_path, "vid")
    fm.write_features(path, frames)
    raw = path.read_bytes()
    assert raw[:4] == b"APLF" and len(raw) == 12 + 4 * 12
    back = fm.read_features(path)
    np.testing.assert_allclose(back, frames, rtol=1e-6)
    fm.write_features(tmp_path / "again.aplf", back)
    assert (tmp_path / "again.aplf").read_bytes() == raw
    path.write_bytes(raw[:-4])
    with pytest.raises(fm.FormatError, match="header implies"):
        fm.read_features(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(fm.FormatError, match="APLF"):
        fm.read_features(path)
    with pytest.raises(fm.FormatError):
        fm.read_feature_dir(tmp_path / "nowhere", ["vid"])


def test_prediction_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    preds = FramePredictions(rng.uniform(size=(2, 5)), rng.uniform(size=5), rng.uniform(size=5),
                             rng.uniform(0, 3, size=(2, 5)))
    path = tmp_path / "p.json"
    fm.write_json(path, fm.predictions_to_json(CLASSES, {"v": (np.arange(5.0), preds)}))
    raw = path.read_bytes()
    classes, back = fm.read_predictions(path)
    assert classes == CLASSES
    fm.write_json(tmp_path / "q.json", fm.predictions_to_json(classes, back))
    assert (tmp_path / "q.json").read_bytes() == raw
    obj = fm.read_json(path)
    obj["videos"]["v"]["frame_times"] = [0.0]
    with pytest.raises(fm.FormatError, match="frame_times"):
        fm.predictions_from_json(obj)


def sample_sets():
    def i(s, score, frame):
        return Instance(Segment(s, s + 2), 0, score, "v", frame)
    pls = PseudoLabelSet([i(0, 0.9, 1)], [i(4, 0.5, 5), i(8, 0.4, 9)], [i(12, 0.1, 13)], 0.8, 0.15,
                         [LogEntry("v:5:0", "mpp_promoted", 0.81), LogEntry("v:9:0", "unscorable", math.nan)],
                         ["single survivor"])
    return {"v": pls}


def test_pseudo_round_trip(tmp_path):
    path = tmp_path / "pl.json"
    fm.write_json(path, fm.pseudo_to_json(CLASSES, sample_sets(), {"mode": "dynamic"}))
    raw = path.read_bytes()
    assert b'"similarity": null' in raw
    classes, sets, prov = fm.read_pseudo(path)
    assert prov == {"mode": "dynamic"}
    assert math.isnan(sets["v"].refinement_log[1].similarity)
    assert [x.key for x in sets["v"].candidates] == [x.key for x in sample_sets()["v"].candidates]
    fm.write_json(tmp_path / "again.json", fm.pseudo_to_json(classes, sets, prov))
    assert (tmp_path / "again.json").read_bytes() == raw


def test_read_detections_accepts_all_instance_formats(tmp_path):
    pl = tmp_path / "pl.json"
    fm.write_json(pl, fm.pseudo_to_json(CLASSES, sample_sets()))
    assert [d.score for d in fm.read_detections(pl)[1]["v"]] == [0.9]
    ann = tmp_path / "ann.json"
    fm.write_annotations(ann, sample_annotations())
    dets = fm.read_detections(ann)[1]
    assert len(dets["v1"]) == 2 and dets["v2"] == []
    plain = tmp_path / "det.json"
    fm.write_json(plain, {"classes": CLASSES, "videos": {"v": [{"segment": [1, 2], "label": "run", "score": 0.3}]}})
    (d,) = fm.read_detections(plain)[1]["v"]
    assert (d.segment, d.class_index, d.score) == (Segment(1, 2), 1, 0.3)
