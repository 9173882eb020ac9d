"""Per-class average precision and mAP at one or several IoU thresholds."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .geometry import boxes_to_array

log = logging.getLogger(__name__)

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class MatchResult:
    """``tp[i]`` refers to ``order[i]``, the i-th detection by rank."""

    order: np.ndarray
    tp: np.ndarray
    gt_matched: np.ndarray

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp


def rank_detections(scores, boxes=None, image_ids=None) -> np.ndarray:
    """Descending score; ties by image id, then box coordinates."""
    scores = np.asarray(scores, dtype=np.float64)
    keys = []
    if boxes is not None:
        b = boxes_to_array(boxes)
        keys += [b[:, 3], b[:, 2], b[:, 1], b[:, 0]]
    if image_ids is not None:
        keys.append(np.asarray(image_ids, dtype=object).astype(str))
    keys.append(-scores)
    return np.lexsort(keys) if keys else np.zeros(0, dtype=np.int64)


def match_detections(det_boxes, det_scores, gt_boxes, iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching of one image's detections of one class to its gts.

    Detections are ranked internally; each takes the highest-IoU unmatched gt
    with IoU >= ``iou_thresh`` (TP) or is a FP.
    """
    det_boxes = boxes_to_array(det_boxes)
    gt_boxes = boxes_to_array(gt_boxes)
    order = rank_detections(det_scores, det_boxes)
    ious = kernels.box_iou_matrix(det_boxes[order], gt_boxes)
    tp, matched = kernels.greedy_match(ious, iou_thresh)
    return MatchResult(order, tp, matched >= 0)


def average_precision(tp, n_gt: int) -> float:
    """All-points interpolated AP from ranked TP flags.

    The precision envelope (running max from the right) is integrated over
    recall. Returns 0 when ``n_gt == 0``.
    """
    tp = np.asarray(tp, dtype=bool)
    if n_gt <= 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


@dataclass
class EvalReport:
    classes: list
    thresholds: tuple
    ap: dict  # class -> {threshold: AP}
    old_classes: list = field(default_factory=list)
    new_classes: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def _mean(self, names, thresholds):
        names = [c for c in names if c in self.ap]
        if not names:
            return 0.0
        return float(np.mean([np.mean([self.ap[c][t] for t in thresholds]) for c in names]))

    def map_at(self, thresh: float = 0.5, names=None) -> float:
        return self._mean(self.ap.keys() if names is None else names, [_key(thresh)])

    @property
    def map50(self) -> float:
        return self.map_at(0.5)

    @property
    def map_coco(self) -> float:
        return self._mean(self.ap.keys(), [_key(t) for t in self.thresholds])

    @property
    def old_map50(self) -> float:
        return self.map_at(0.5, self.old_classes)

    @property
    def new_map50(self) -> float:
        return self.map_at(0.5, self.new_classes)

    def to_json(self) -> dict:
        has50 = _key(0.5) in {_key(t) for t in self.thresholds}
        return {
            "classes": list(self.classes),
            "thresholds": [float(t) for t in self.thresholds],
            "ap": {c: {f"{float(t):.2f}": float(v) for t, v in d.items()} for c, d in self.ap.items()},
            "mAP@0.5": self.map50 if has50 else None,
            "mAP@[0.5:0.95]": self.map_coco,
            "old_classes": list(self.old_classes),
            "new_classes": list(self.new_classes),
            "old_mAP@0.5": self.old_map50 if has50 else None,
            "new_mAP@0.5": self.new_map50 if has50 else None,
            "notes": list(self.notes),
        }

    @classmethod
    def from_json(cls, d) -> "EvalReport":
        ap = {c: {float(t): float(v) for t, v in m.items()} for c, m in d["ap"].items()}
        return cls(d["classes"], tuple(d["thresholds"]), ap, d.get("old_classes", []),
                   d.get("new_classes", []), d.get("notes", []))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class"] + [f"AP@{float(t):.2f}" for t in self.thresholds])
        for c in self.classes:
            if c in self.ap:
                w.writerow([c] + [f"{self.ap[c][_key(t)]:.10f}" for t in self.thresholds])
        return buf.getvalue()

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def _key(t) -> float:
    return round(float(t), 4)


def evaluate(detections: Mapping[str, Sequence], samples: Iterable, classes: Sequence[str],
             iou_thresholds: Sequence[float] = (0.5,), old_classes: Sequence[str] = (),
             new_classes: Sequence[str] = ()) -> EvalReport:
    """Evaluate detections against the FULL annotations of ``samples``.

    ``detections`` maps image id to a list of :class:`~incdet.detector.Detection`
    whose ``class_id`` indexes ``classes``. Classes with neither ground truth
    nor detections are left out of every mean.
    """
    samples = list(samples)
    thresholds = tuple(_key(t) for t in iou_thresholds)
    ap: dict = {}
    notes = []
    for ci, name in enumerate(classes):
        img_ids, scores, boxes, per_image = [], [], [], []
        n_gt = 0
        for s in samples:
            gt = boxes_to_array([a.box for a in s.analysis_annotations() if a.label == name])
            n_gt += len(gt)
            dets = [d for d in detections.get(s.image_id, ()) if d.class_id == ci]
            if not dets:
                continue
            db = boxes_to_array([d.box for d in dets])
            ds = np.array([d.score for d in dets])
            per_image.append((s.image_id, db, ds, gt))
        if n_gt == 0 and not per_image:
            notes.append(f"class {name!r} has no ground truth and no detections; excluded")
            continue
        # global ranking; per-image matching in that order is equivalent to global greedy
        ranked = []
        for iid, db, ds, gt in per_image:
            order = rank_detections(ds, db)
            ious = kernels.box_iou_matrix(db[order], gt)
            ranked.append((iid, db[order], ds[order], ious))
            img_ids += [iid] * len(order)
            scores.append(ds[order])
            boxes.append(db[order])
        all_scores = np.concatenate(scores) if scores else np.zeros(0)
        all_boxes = np.concatenate(boxes) if boxes else np.zeros((0, 4))
        global_order = rank_detections(all_scores, all_boxes, img_ids)
        ap[name] = {}
        for t in thresholds:
            flags = np.concatenate([kernels.greedy_match(ious, t)[0] for _, _, _, ious in ranked]) \
                if ranked else np.zeros(0, dtype=bool)
            ap[name][t] = average_precision(flags[global_order], n_gt)
    for n in notes:
        log.info(n)
    return EvalReport(list(classes), thresholds, ap, list(old_classes), list(new_classes), notes)


def detections_to_records(detections: Mapping[str, Sequence]) -> list:
    return [d.to_record() for iid in sorted(detections) for d in detections[iid]]
