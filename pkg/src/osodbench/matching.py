"""Geometric primitives shared by the metrics and pseudo-labeling code:
IoU, greedy score-ordered matching, and NMS.

All functions are pure and stateless. Matching is injective both ways and
deterministic: ties on IoU pick the lowest ground-truth index, ties on score
keep input order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .data_model import BoundingBox, Detection, GroundTruthObject
from .errors import ContractViolationError


@dataclass(frozen=True)
class MatchResult:
    """Injective detection/ground-truth assignment, indices into the inputs."""

    detection_to_gt: tuple[int | None, ...]
    gt_to_detection: tuple[int | None, ...]

    @property
    def num_matched(self) -> int:
        return sum(1 for g in self.detection_to_gt if g is not None)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two valid boxes; 0.0 when disjoint."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def greedy_match(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthObject],
    iou_threshold: float,
    eligibility: Callable[[Detection, GroundTruthObject], bool] | None = None,
    strict: bool = False,
) -> MatchResult:
    """Match score-ordered detections against ground truths one at a time.

    Each detection, in order, takes the eligible still-unmatched ground truth
    of its own image with the highest IoU, provided that IoU reaches
    ``iou_threshold`` (``>=`` by default, ``>`` when ``strict``). Detections
    must arrive sorted by descending score; anything else is a contract
    violation. ``eligibility`` adds class or super-class rules on top of the
    built-in same-image constraint.
    """
    for i in range(len(detections) - 1):
        if detections[i].score < detections[i + 1].score:
            raise ContractViolationError("detections must be sorted by descending score")

    gts_by_image: dict[int | str, list[int]] = {}
    for j, gt in enumerate(ground_truths):
        gts_by_image.setdefault(gt.image_id, []).append(j)

    det_to_gt: list[int | None] = [None] * len(detections)
    gt_to_det: list[int | None] = [None] * len(ground_truths)
    for i, det in enumerate(detections):
        best_j = -1
        best_iou = 0.0
        for j in gts_by_image.get(det.image_id, ()):
            if gt_to_det[j] is not None:
                continue
            gt = ground_truths[j]
            if eligibility is not None and not eligibility(det, gt):
                continue
            v = iou(det.box, gt.box)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and (best_iou > iou_threshold if strict else best_iou >= iou_threshold):
            det_to_gt[i] = best_j
            gt_to_det[best_j] = i
    return MatchResult(detection_to_gt=tuple(det_to_gt), gt_to_detection=tuple(gt_to_det))


def nms(boxes: Sequence[BoundingBox], scores: Sequence[float], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-score box and suppresses every remaining box
    with IoU strictly above ``iou_threshold`` against it. Returns kept indices
    in descending-score order; score ties keep input order.
    """
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    alive = [True] * len(boxes)
    for i in order:
        if not alive[i]:
            continue
        kept.append(i)
        for j in order:
            if alive[j] and j != i and iou(boxes[i], boxes[j]) > iou_threshold:
                alive[j] = False
    return kept
