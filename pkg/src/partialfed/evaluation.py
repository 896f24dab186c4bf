"""IoU, greedy detection matching, all-points AP, mAP50 and the ID/CD matrix."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EvaluationError

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for f in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, f, float(getattr(self, f)))
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def is_normalized(self) -> bool:
        return 0.0 <= self.x1 and 0.0 <= self.y1 and self.x2 <= 1.0 and self.y2 <= 1.0


@dataclass(frozen=True)
class Detection:
    frame: tuple  # (video_id, frame_id)
    class_id: int
    bbox: BBox
    confidence: float

    def __post_init__(self):
        object.__setattr__(self, "confidence", float(self.confidence))
        if not math.isfinite(self.confidence):
            raise ValueError("detection confidence must be finite")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _confidence_order(confidences) -> list:
    # stable: equal confidences keep input order
    return sorted(range(len(confidences)), key=lambda i: -confidences[i])


def match_detections(dets: Sequence[Detection], gts: Sequence[BBox], threshold=IOU_THRESHOLD) -> list:
    """TP/FP label per detection, aligned with the input order.

    Detections are visited by descending confidence. Each one is compared
    against the ground truths still unmatched; it is a TP when the best of
    those reaches ``threshold``, and that ground truth is then consumed.
    """
    labels = [False] * len(dets)
    free = list(range(len(gts)))
    for i in _confidence_order([d.confidence for d in dets]):
        best, best_j = -1.0, None
        for j in free:
            v = iou(dets[i].bbox, gts[j])
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= threshold:
            labels[i] = True
            free.remove(best_j)
    return labels


def average_precision(labels: Sequence[bool], n_gt: int):
    """Area under the monotone precision envelope of a confidence-sorted TP/FP list.

    Returns ``None`` when there is nothing to score (no ground truth and no
    detections); such a class is left out of the mean.
    """
    if n_gt == 0:
        return 0.0 if len(labels) else None
    if not len(labels):
        return 0.0
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(labels, dtype=np.float64))
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope[1:]))


@dataclass
class MapResult:
    per_class: dict
    mean: float


def map50(dets: Iterable[Detection], gts: Mapping, threshold=IOU_THRESHOLD) -> MapResult:
    """mAP at IoU 0.5.

    ``gts`` maps ``frame -> [(class_id, BBox), ...]``. Detections on frames
    absent from ``gts`` count against frames with no ground truth.
    """
    gt_by = defaultdict(list)  # (class, frame) -> boxes
    n_gt = defaultdict(int)
    for frame, anns in gts.items():
        for class_id, box in anns:
            gt_by[class_id, frame].append(box)
            n_gt[class_id] += 1
    det_by = defaultdict(list)  # (class, frame) -> [(input index, det)]
    for seq, d in enumerate(dets):
        det_by[d.class_id, d.frame].append((seq, d))

    labelled = defaultdict(list)  # class -> [(confidence, input index, label)]
    for (class_id, frame), group in det_by.items():
        found = [d for _, d in group]
        for (seq, d), lab in zip(group, match_detections(found, gt_by.get((class_id, frame), []), threshold)):
            labelled[class_id].append((d.confidence, seq, lab))

    per_class = {}
    for class_id in sorted(set(n_gt) | set(labelled)):
        rows = sorted(labelled.get(class_id, []), key=lambda r: (-r[0], r[1]))
        ap = average_precision([r[2] for r in rows], n_gt.get(class_id, 0))
        if ap is not None:
            per_class[class_id] = ap
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return MapResult(per_class, mean)


# Evaluation matrix ----------------------------------------------------------

def _mean_std(values):
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        return None, None
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return float(vals.mean()), std


@dataclass
class EvalMatrix:
    """Square matrix: row = model's client, column = test split's client."""

    clients: list
    entries: np.ndarray
    metric: str = "map50"
    seed_set: str = field(default="")

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        n = len(self.clients)
        if self.entries.shape != (n, n):
            raise EvaluationError(f"eval matrix must be {n}x{n}, got {self.entries.shape}")
        if self.metric == "map50" and np.any((self.entries < 0) | (self.entries > 1)):
            raise EvaluationError("mAP50 entries must lie in [0, 1]")

    @property
    def id_values(self) -> list:
        return [float(v) for v in np.diag(self.entries)]

    @property
    def cd_values(self) -> list:
        n = len(self.clients)
        return [float(self.entries[i, j]) for i in range(n) for j in range(n) if i != j]

    @property
    def id_summary(self):
        return _mean_std(self.id_values)

    @property
    def cd_summary(self):
        """``(None, None)`` for a single client: there is no cross-distribution cell."""
        return _mean_std(self.cd_values)

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model_client"] + list(self.clients))
            for cid, row in zip(self.clients, self.entries):
                w.writerow([cid] + [repr(float(v)) for v in row])
            id_mean, id_std = self.id_summary
            cd_mean, cd_std = self.cd_summary
            w.writerow(["summary", f"id_mean={_fmt(id_mean)}", f"id_std={_fmt(id_std)}",
                        f"cd_mean={_fmt(cd_mean)}", f"cd_std={_fmt(cd_std)}"])

    @classmethod
    def from_csv(cls, path, metric="map50"):
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh)]
        clients = rows[0][1:]
        entries = [[float(v) for v in r[1:]] for r in rows[1:1 + len(clients)]]
        return cls(clients, np.array(entries), metric=metric)


def _fmt(v):
    return "" if v is None else repr(float(v))


def eval_matrix(models: Mapping, trainer, clients: Sequence, metric="map50") -> EvalMatrix:
    """Score every client's model on every client's test split.

    ``clients`` are :class:`~partialfed.partitioning.ClientData` handles in
    matrix order; ``trainer.evaluate(params, data, "test")`` supplies each cell.
    """
    ids = [c.client_id for c in clients]
    missing = [cid for cid in ids if cid not in models]
    if missing:
        raise EvaluationError(f"no model for clients {missing}")
    entries = np.zeros((len(ids), len(ids)))
    for i, cid in enumerate(ids):
        for j, data in enumerate(clients):
            entries[i, j] = trainer.evaluate(models[cid], data, "test")
    return EvalMatrix(ids, entries, metric=metric)


# Detections file --------------------------------------------------------------

def read_detections(path) -> list:
    """Tab-separated ``video_id frame_id class_id confidence x1 y1 x2 y2`` per line."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 8:
                raise EvaluationError(f"{path}:{lineno}: expected 8 tab-separated fields, got {len(parts)}")
            vid, fid, cls, conf, *xyxy = parts
            try:
                out.append(Detection((vid, int(fid)), int(cls), BBox(*map(float, xyxy)), float(conf)))
            except ValueError as exc:
                raise EvaluationError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_detections(path, dets: Iterable[Detection]):
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for d in dets:
            b = d.bbox
            fh.write(f"{d.frame[0]}\t{d.frame[1]}\t{d.class_id}\t{d.confidence!r}\t{b.x1!r}\t{b.y1!r}\t{b.x2!r}\t{b.y2!r}\n")
