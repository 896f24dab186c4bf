import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ap_oracle, greedy_labels_bruteforce, map50_oracle
from partialfed.errors import EvaluationError
from partialfed.evaluation import (
    BBox,
    Detection,
    EvalMatrix,
    average_precision,
    eval_matrix,
    iou,
    map50,
    match_detections,
    read_detections,
    write_detections,
)
from partialfed.partitioning import ClientData, FrameRecord
from partialfed.schema import ParameterSet, toy_schema
from partialfed.trainer import MockDetector


def box(x1, y1, x2, y2):
    return BBox(x1, y1, x2, y2)


def det(box_, conf, cls=0, frame=("v", 0)):
    return Detection(frame, cls, box_, conf)


def test_iou_examples():
    a = box(0, 0, 1, 1)
    assert iou(a, a) == 1.0
    assert iou(a, box(0, 0, 0.5, 0.5)) == 0.25
    assert iou(box(0, 0, 0.4, 0.4), box(0.5, 0.5, 1, 1)) == 0.0
    assert math.isclose(iou(a, box(0.5, 0, 1.5, 1)), 1 / 3)


def test_bbox_validation():
    with pytest.raises(ValueError):
        box(0.5, 0, 0.5, 1)
    with pytest.raises(ValueError):
        box(0, 0.6, 1, 0.2)
    with pytest.raises(ValueError):
        Detection(("v", 0), 0, box(0, 0, 1, 1), float("nan"))


coords = st.floats(0, 1, allow_nan=False)


@st.composite
def boxes(draw):
    x1, x2 = sorted(draw(st.lists(coords, min_size=2, max_size=2, unique=True)))
    y1, y2 = sorted(draw(st.lists(coords, min_size=2, max_size=2, unique=True)))
    return box(x1, y1, x2, y2)


@settings(max_examples=300, deadline=None)
@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert math.isclose(iou(a, a), 1.0)


def test_match_examples():
    g = box(0.1, 0.1, 0.4, 0.4)
    assert match_detections([det(g, 0.9)], [g]) == [True]
    assert match_detections([det(g, 0.6), det(g, 0.9)], [g]) == [False, True]
    assert match_detections([det(g, 0.9)], []) == [False]


def test_match_takes_best_iou_unmatched():
    g1, g2 = box(0.0, 0.0, 0.4, 0.4), box(0.05, 0.0, 0.45, 0.4)
    d = det(box(0.05, 0.0, 0.45, 0.4), 0.9)
    d2 = det(box(0.0, 0.0, 0.4, 0.4), 0.8)
    assert match_detections([d, d2], [g1, g2]) == [True, True]


def test_ap_hand_case():
    assert math.isclose(average_precision([True, False, True], 2), 5 / 6, abs_tol=1e-12)


def test_ap_edges():
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([], 3) == 0.0
    assert average_precision([False], 0) == 0.0
    assert average_precision([], 0) is None


def test_map_examples():
    g = box(0.1, 0.1, 0.4, 0.4)
    far = box(0.6, 0.6, 0.9, 0.9)
    gts = {("v", 0): [(0, g), (0, far)]}
    # one hit at rank 1, one of two ground truths: AP = 0.5
    assert map50([det(g, 0.9)], gts).mean == 0.5
    gts = {("v", 0): [(0, g), (1, g)]}
    res = map50([det(g, 0.9, 0), det(far, 0.9, 1)], gts)
    assert res.per_class == {0: 1.0, 1: 0.0} and res.mean == 0.5


def test_map_no_classes_is_zero():
    assert map50([], {}).mean == 0.0


def test_map_detection_on_unlabelled_class_counts():
    g = box(0.1, 0.1, 0.4, 0.4)
    res = map50([det(g, 0.9, 0), det(g, 0.5, 2)], {("v", 0): [(0, g)]})
    assert res.per_class == {0: 1.0, 2: 0.0}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), max_size=12), st.integers(0, 12))
def test_ap_matches_oracle(labels, extra):
    n_gt = sum(labels) + extra
    got, want = average_precision(labels, n_gt), ap_oracle(labels, n_gt)
    assert (got is None and want is None) or abs(got - want) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=10), st.integers(0, 5))
def test_trailing_false_positive_never_helps(labels, extra):
    n_gt = max(1, sum(labels) + extra)
    assert average_precision(labels + [False], n_gt) <= average_precision(labels, n_gt) + 1e-15


@st.composite
def instances(draw, max_dets=5, max_gts=5, n_classes=3, n_frames=2):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))

    def rand_box():
        w, h = rng.uniform(0.1, 0.5, size=2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        return float(x), float(y), float(x + w), float(y + h)

    gts = [(("v", int(rng.integers(n_frames))), int(rng.integers(n_classes)), rand_box())
           for _ in range(draw(st.integers(0, max_gts)))]
    dets = []
    for _ in range(draw(st.integers(0, max_dets))):
        if gts and rng.random() < 0.7:  # perturb a ground truth so matches happen
            f, c, b = gts[int(rng.integers(len(gts)))]
            j = rng.normal(0, 0.05, size=4)
            x1, y1 = min(b[0] + j[0], b[2] - 0.01), min(b[1] + j[1], b[3] - 0.01)
            bb = (max(0.0, x1), max(0.0, y1), min(1.0, max(b[2] + j[2], x1 + 0.01)), min(1.0, max(b[3] + j[3], y1 + 0.01)))
        else:
            f, c, bb = ("v", int(rng.integers(n_frames))), int(rng.integers(n_classes)), rand_box()
        conf = float(rng.choice([0.25, 0.5, 0.75])) if rng.random() < 0.4 else float(rng.random())
        dets.append((f, c, conf, bb))
    return dets, gts


def to_pipeline(dets, gts):
    d = [Detection(f, c, BBox(*b), conf) for f, c, conf, b in dets]
    g = {}
    for f, c, b in gts:
        g.setdefault(f, []).append((c, BBox(*b)))
    return d, g


@settings(max_examples=300, deadline=None)
@given(instances())
def test_map50_matches_bruteforce(inst):
    dets, gts = inst
    d, g = to_pipeline(dets, gts)
    assert abs(map50(d, g).mean - map50_oracle(dets, gts)) <= 1e-9


@settings(max_examples=300, deadline=None)
@given(instances(n_classes=1, n_frames=1, max_gts=2, max_dets=3))
def test_matching_matches_bruteforce(inst):
    dets, gts = inst
    got = match_detections([Detection(f, c, BBox(*b), conf) for f, c, conf, b in dets], [BBox(*b) for _, _, b in gts])
    assert got == greedy_labels_bruteforce([(conf, b) for _, _, conf, b in dets], [b for _, _, b in gts])


@settings(max_examples=100, deadline=None)
@given(instances(), st.randoms(use_true_random=False))
def test_reordering_equal_confidence_dets_of_other_classes(inst, rnd):
    # mAP depends on the input order only through ties within a class
    dets, gts = inst
    d, g = to_pipeline(dets, gts)
    by_class = {}
    for x in d:
        by_class.setdefault(x.class_id, []).append(x)
    classes = list(by_class)
    rnd.shuffle(classes)
    regrouped = [x for c in classes for x in by_class[c]]
    assert map50(regrouped, g).per_class == map50(d, g).per_class


# evaluation matrix ------------------------------------------------------------------

def test_matrix_id_cd_and_std():
    m = EvalMatrix(["a", "b", "c"], [[0.9, 0.1, 0.2], [0.3, 0.8, 0.4], [0.5, 0.6, 0.7]])
    assert m.id_values == [0.9, 0.8, 0.7]
    assert m.cd_values == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
    mean, std = m.cd_summary
    assert math.isclose(mean, 0.35)
    assert math.isclose(std, float(np.std([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], ddof=1)), rel_tol=1e-12)


def test_matrix_single_client():
    m = EvalMatrix(["a"], [[0.5]])
    assert m.id_summary == (0.5, 0.0)
    assert m.cd_summary == (None, None)


def test_matrix_validation():
    with pytest.raises(EvaluationError):
        EvalMatrix(["a", "b"], [[0.5]])
    with pytest.raises(EvaluationError):
        EvalMatrix(["a"], [[1.5]])
    EvalMatrix(["a"], [[-3.0]], metric="neg_distance")  # range check is specific to mAP


def test_matrix_csv_round_trip(tmp_path):
    m = EvalMatrix(["a", "b"], [[0.25, 0.5], [0.125, 1.0]])
    m.to_csv(tmp_path / "m.csv")
    back = EvalMatrix.from_csv(tmp_path / "m.csv")
    assert back.clients == m.clients and np.array_equal(back.entries, m.entries)
    assert (tmp_path / "m.csv").read_text().splitlines()[-1].startswith("summary,")


def _clients():
    rng = np.random.default_rng(0)
    out = []
    for k in range(3):
        frames = tuple(
            FrameRecord(f"v{k}", f, "s", ((int(rng.integers(2)), BBox(0.1 * k, 0.2, 0.1 * k + 0.3, 0.6)),))
            for f in range(4)
        )
        out.append(ClientData(f"client{k}", k, {"train": frames, "valid": frames, "test": frames}))
    return out


def test_eval_matrix_zero_jitter_all_ones():
    clients = _clients()
    s = toy_schema()
    models = {c.client_id: ParameterSet.full(s, float(i)) for i, c in enumerate(clients)}
    m = eval_matrix(models, MockDetector(jitter=0.0), clients)
    assert np.all(m.entries == 1.0)


def test_eval_matrix_identical_models_constant_columns():
    clients = _clients()
    s = toy_schema()
    p = ParameterSet.full(s, 0.5)
    m = eval_matrix({c.client_id: p for c in clients}, MockDetector(jitter=0.4), clients)
    assert np.all(m.entries == m.entries[0])


def test_eval_matrix_missing_model():
    clients = _clients()
    with pytest.raises(EvaluationError):
        eval_matrix({"client0": ParameterSet.full(toy_schema())}, MockDetector(), clients)


def test_detections_file_round_trip(tmp_path):
    dets = [det(box(0.1, 0.2, 0.3, 0.4), 0.75, 2, ("VID01", 7)), det(box(0.5, 0.5, 0.6, 0.9), 0.1, 0, ("v02", 0))]
    write_detections(tmp_path / "d.tsv", dets)
    assert read_detections(tmp_path / "d.tsv") == dets


def test_detections_file_errors(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_text("v\t0\t1\t0.5\t0.1\t0.1\t0.2\n")
    with pytest.raises(EvaluationError):
        read_detections(p)
