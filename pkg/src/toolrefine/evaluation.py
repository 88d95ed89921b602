"""COCO-style detection mAP and annotation-cost accounting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import BoundingBox, GroundTruthBox, ImageDetections

# k/20 and k/100 are the correctly rounded doubles of 0.50, 0.55, ... and 0.00, 0.01, ...
IOU_THRESHOLDS = tuple((10 + k) / 20 for k in range(10))
RECALL_POINTS = np.arange(101) / 100


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.u2, b.u2) - max(a.u1, b.u1)
    ih = min(a.v2, b.v2) - max(a.v1, b.v1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class EvalReport:
    per_class_ap: np.ndarray  # C x T, NaN for classes without ground truth
    map: float
    thresholds: tuple[float, ...]
    tp: list[int]
    fp: list[int]
    fn: list[int]
    class_names: Sequence[str] | None = None

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.per_class_ap[:, 0])

    def map_at(self, threshold: float) -> float:
        t = self.thresholds.index(threshold)
        col = self.per_class_ap[self.present, t]
        return float(col.mean()) if col.size else 0.0

    def to_json(self) -> dict:
        names = self.class_names or [str(k) for k in range(len(self.per_class_ap))]
        return {
            "map": self.map,
            "map50": self.map_at(0.5),
            "map75": self.map_at(0.75),
            "thresholds": list(self.thresholds),
            "per_class_ap": {
                name: (None if np.isnan(row[0]) else [float(v) for v in row])
                for name, row in zip(names, self.per_class_ap)
            },
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path) -> None:
        names = self.class_names or [str(k) for k in range(len(self.per_class_ap))]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "threshold", "ap"])
            for name, row in zip(names, self.per_class_ap):
                if np.isnan(row[0]):
                    continue
                for t, ap in zip(self.thresholds, row):
                    w.writerow([name, t, repr(float(ap))])


def detection_score(proposal) -> float:
    """Ranking confidence: objectness times the probability of the assigned class."""
    return proposal.objectness * proposal.class_probability


def interpolated_ap(tp_flags: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from TP flags of score-sorted predictions."""
    if num_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at this recall or beyond
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < len(recall)
    return float(np.where(valid, precision[np.minimum(idx, len(recall) - 1)], 0.0).sum() / 101)


def _match_class(preds, gt_boxes, threshold):
    """Greedy matching of score-sorted predictions; returns boolean TP flags."""
    matched = {image_id: [False] * len(boxes) for image_id, boxes in gt_boxes.items()}
    flags = np.zeros(len(preds), dtype=bool)
    for n, (_, _, _, image_id, box) in enumerate(preds):
        best, best_iou = -1, threshold
        for g, gbox in enumerate(gt_boxes.get(image_id, ())):
            if matched[image_id][g]:
                continue
            o = iou(box, gbox)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = g, o
        if best >= 0:
            matched[image_id][best] = True
            flags[n] = True
    return flags


def evaluate(
    predictions: Sequence[ImageDetections],
    groundtruth: Mapping[str, Sequence[GroundTruthBox]],
    num_classes: int,
    class_names: Sequence[str] | None = None,
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> EvalReport:
    """mAP over IoU thresholds and over classes that have ground truth.

    Each proposal counts as a detection of its ``category`` (the refined class
    when present) with score :func:`detection_score`.
    """
    for det in predictions:
        if det.image_id not in groundtruth:
            raise KeyError(f"prediction for unknown image_id {det.image_id!r}")

    per_class_preds: list[list] = [[] for _ in range(num_classes)]
    order = 0
    for det in predictions:
        for p in det.proposals:
            per_class_preds[p.category].append((-detection_score(p), det.image_id, order, det.image_id, p.box))
            order += 1
    per_class_gt: list[dict[str, list[BoundingBox]]] = [{} for _ in range(num_classes)]
    for image_id, boxes in groundtruth.items():
        for b in boxes:
            per_class_gt[b.category].setdefault(image_id, []).append(b.box)

    T = len(thresholds)
    ap = np.full((num_classes, T), np.nan)
    tp_tot, fp_tot, fn_tot = [0] * T, [0] * T, [0] * T
    for c in range(num_classes):
        preds = sorted(per_class_preds[c], key=lambda r: r[:3])
        num_gt = sum(len(v) for v in per_class_gt[c].values())
        for t, thr in enumerate(thresholds):
            flags = _match_class(preds, per_class_gt[c], thr)
            ntp = int(flags.sum())
            tp_tot[t] += ntp
            fp_tot[t] += len(flags) - ntp
            fn_tot[t] += num_gt - ntp
            if num_gt:
                ap[c, t] = interpolated_ap(flags, num_gt)
    present = ~np.isnan(ap[:, 0])
    m = float(ap[present].mean()) if present.any() else 0.0
    return EvalReport(ap, m, tuple(thresholds), tp_tot, fp_tot, fn_tot,
                      list(class_names) if class_names is not None else None)


@dataclass(frozen=True)
class BudgetReport:
    num_boxes: int
    num_weak_images: int
    seconds_per_box: float = 10.0
    seconds_per_image_label: float = 1.0
    mode: str = "per_image"
    num_image_labels: int | None = field(default=None)

    @property
    def total_seconds(self) -> float:
        labels = self.num_weak_images if self.num_image_labels is None else self.num_image_labels
        return self.seconds_per_box * self.num_boxes + self.seconds_per_image_label * labels

    def to_json(self) -> dict:
        return {
            "num_boxes": self.num_boxes,
            "num_weak_images": self.num_weak_images,
            "num_image_labels": self.num_image_labels,
            "seconds_per_box": self.seconds_per_box,
            "seconds_per_image_label": self.seconds_per_image_label,
            "mode": self.mode,
            "total_seconds": self.total_seconds,
        }


def annotation_budget(
    num_boxes: int,
    num_weak_images: int,
    seconds_per_box: float = 10.0,
    seconds_per_image_label: float = 1.0,
    mode: str = "per_image",
    present_classes: int | None = None,
) -> BudgetReport:
    """Annotation time for ``num_boxes`` box annotations plus weak image labels.

    In ``per_class`` mode the image-label cost is charged once per present
    class (``present_classes`` in total) instead of once per image.
    """
    if num_boxes < 0 or num_weak_images < 0:
        raise ValueError("counts must be nonnegative")
    if mode not in ("per_image", "per_class"):
        raise ValueError(f"unknown budget mode {mode!r}")
    if mode == "per_class" and present_classes is None:
        raise ValueError("per_class mode needs present_classes")
    return BudgetReport(num_boxes, num_weak_images, seconds_per_box, seconds_per_image_label, mode,
                        present_classes if mode == "per_class" else None)
