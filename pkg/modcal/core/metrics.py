"""
COCO-style box average precision.

Per class, detections of all images are matched greedily (highest score first,
each to the unmatched ground-truth box of highest IoU above the threshold),
ranked by score, and the precision envelope is sampled at 101 recall points.
Classes without ground truth are skipped; mAP is the mean over the rest.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Hashable, List, Mapping, Sequence, Tuple

import numpy as np

from modcal.core.detector import Detection
from modcal.core.errors import InputError
from modcal.core.synthdata import BoxAnnotation

IOU_THRESHOLDS: Tuple[float, ...] = tuple(float(t) for t in np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MapResult:
    ap50: float
    ap: float
    per_threshold: Dict[float, float] = field(default_factory=dict)
    per_class: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ap50": self.ap50,
            "ap": self.ap,
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "per_class": {str(c): v for c, v in self.per_class.items()},
        }


def box_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """IoU matrix between [N, 4] and [M, 4] (x0, y0, x1, y1) arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    x0 = np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    y0 = np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    x1 = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2])
    y1 = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def interpolated_ap(scores: np.ndarray, matched: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP of ranked detections."""
    if num_gt == 0:
        raise InputError("AP is undefined without ground truth")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    hits = np.asarray(matched, dtype=bool)[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]

    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(np.mean(sampled))


def match_image(detections: Sequence[Detection], truth: Sequence[BoxAnnotation],
                class_id: int, iou_threshold: float) -> Tuple[List[float], List[bool]]:
    """Greedy matching of one image's detections of one class."""
    dets = sorted((d for d in detections if d.class_id == class_id), key=lambda d: -d.score)
    gts = [t.box for t in truth if t.class_id == class_id]
    if not dets:
        return [], []
    if not gts:
        return [d.score for d in dets], [False] * len(dets)

    ious = box_iou(np.array([d.box for d in dets]), np.array(gts))
    taken = np.zeros(len(gts), dtype=bool)
    matched = []
    for i in range(len(dets)):
        candidates = np.where(taken, -1.0, ious[i])
        best = int(np.argmax(candidates))
        if candidates[best] >= iou_threshold:
            taken[best] = True
            matched.append(True)
        else:
            matched.append(False)
    return [d.score for d in dets], matched


def evaluate_map(predictions: Mapping[Hashable, Sequence[Detection]],
                 ground_truth: Mapping[Hashable, Sequence[BoxAnnotation]],
                 iou_thresholds: Sequence[float] = IOU_THRESHOLDS) -> MapResult:
    """AP@0.5 and AP averaged over ``iou_thresholds`` (COCO 0.50:0.95 by default)."""
    if set(predictions) != set(ground_truth):
        missing = set(ground_truth) ^ set(predictions)
        raise InputError(f"prediction and ground-truth image ids differ: {sorted(map(str, missing))[:5]}")

    image_ids = sorted(ground_truth, key=str)
    classes = sorted({t.class_id for gts in ground_truth.values() for t in gts})
    thresholds = sorted(set(float(t) for t in iou_thresholds) | {0.5})

    per_threshold: Dict[float, float] = {}
    per_class_sum = {c: 0.0 for c in classes}
    for threshold in thresholds:
        class_aps = []
        for class_id in classes:
            scores: List[float] = []
            matched: List[bool] = []
            num_gt = 0
            for image_id in image_ids:
                s, m = match_image(predictions[image_id], ground_truth[image_id], class_id, threshold)
                scores += s
                matched += m
                num_gt += sum(1 for t in ground_truth[image_id] if t.class_id == class_id)
            ap = interpolated_ap(np.array(scores), np.array(matched, dtype=bool), num_gt)
            class_aps.append(ap)
            if threshold in iou_thresholds:
                per_class_sum[class_id] += ap
        per_threshold[threshold] = float(np.mean(class_aps)) if class_aps else 0.0

    selected = [per_threshold[float(t)] for t in iou_thresholds]
    n = len(iou_thresholds)
    return MapResult(
        ap50=per_threshold[0.5],
        ap=float(np.mean(selected)) if selected else 0.0,
        per_threshold={float(t): per_threshold[float(t)] for t in iou_thresholds},
        per_class={c: per_class_sum[c] / n for c in classes},
    )
