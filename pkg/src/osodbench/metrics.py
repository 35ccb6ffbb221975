"""The full open-set metric suite over matched detections.

Average precision uses all-point interpolation at IoU 0.5 by default, the
convention of the public evaluators this toolkit is meant to agree with; an
11-point legacy mode is available via :class:`MetricConfig`. A-OSE, U-Recall,
and wilderness impact operate at an explicit confidence threshold ``tau``,
which is always surfaced in the report so results stay reproducible.

All curve arithmetic is plain Python floats in a fixed order, so results are
bit-stable across runs and independent of how work is scheduled.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

from .data_model import ClassPartition, Dataset, Detection, GroundTruthObject, Taxonomy
from .errors import ContractViolationError, PreconditionError, TaxonomyError, UndefinedMetricError
from .matching import greedy_match
from .splits import SplitSet

log = logging.getLogger(__name__)

SPLIT_NAMES = ("id", "ood", "all")


@dataclass(frozen=True)
class MetricConfig:
    """Evaluation knobs. ``score_threshold`` is the tau applied by A-OSE,
    U-Recall, and wilderness impact; AP metrics are rank-based and ignore it.
    ``strict_iou`` switches matching from >= to > for the IoU test."""

    iou_threshold: float = 0.5
    score_threshold: float = 0.05
    strict_iou: bool = False
    interpolation: str = "all"
    compute_wi: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if not 0.0 < self.score_threshold <= 1.0:
            raise ValueError(f"score_threshold must be in (0, 1], got {self.score_threshold}")
        if self.interpolation not in ("all", "11point"):
            raise ValueError(f"interpolation must be 'all' or '11point', got {self.interpolation!r}")

    def resolved(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "score_threshold": self.score_threshold,
            "strict_iou": self.strict_iou,
            "interpolation": self.interpolation,
            "compute_wi": self.compute_wi,
        }


@dataclass(frozen=True)
class PRCurve:
    """Per-rank (score, recall, precision) points, descending score."""

    points: tuple[tuple[float, float, float], ...]
    num_ground_truth: int

    def to_doc(self) -> dict:
        return {
            "num_ground_truth": self.num_ground_truth,
            "points": [[s, r, p] for s, r, p in self.points],
        }


@dataclass(frozen=True)
class SuperClassCounts:
    """Outcome totals of the super-class-aware matching pass."""

    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    """Structured evaluation output: resolved config, per-split metric values,
    PR curves, free-form notes, and optional per-tau sweep rows. Serialization
    is canonical (sorted keys, two-space indent) so identical inputs always
    produce identical bytes."""

    config: dict
    splits: dict
    pr_curves: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    tau_sweep: dict = field(default_factory=dict)

    def to_json(self) -> str:
        import json

        doc = {
            "config": self.config,
            "splits": self.splits,
            "pr_curves": self.pr_curves,
            "notes": self.notes,
            "tau_sweep": self.tau_sweep,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        import json

        doc = json.loads(text)
        return cls(
            config=doc["config"],
            splits=doc["splits"],
            pr_curves=doc.get("pr_curves", {}),
            notes=doc.get("notes", []),
            tau_sweep=doc.get("tau_sweep", {}),
        )


def _sorted_by_score(detections: Sequence[Detection]) -> list[Detection]:
    return sorted(detections, key=lambda d: -d.score)


def _curve_points(
    flags: Sequence[tuple[float, bool]], num_gt: int
) -> tuple[list[float], list[float], list[float]]:
    scores, recalls, precisions = [], [], []
    tp = fp = 0
    for score, is_tp in flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        scores.append(score)
        recalls.append(tp / num_gt if num_gt else 0.0)
        precisions.append(tp / (tp + fp))
    return scores, recalls, precisions


def average_precision(
    scored_flags: Sequence[tuple[float, bool]], num_gt: int, interpolation: str = "all"
) -> float:
    """AP over (score, is_true_positive) pairs against ``num_gt`` targets.

    Pairs are stably sorted by descending score. All-point interpolation sums
    recall increments times the precision envelope; returns 0.0 when there is
    nothing to detect or nothing detected.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    flags = sorted(scored_flags, key=lambda sf: -sf[0])
    tp_total = sum(1 for _, t in flags if t)
    if tp_total > num_gt:
        raise ContractViolationError(f"{tp_total} true positives exceed num_gt={num_gt}")
    if num_gt == 0 or not flags:
        return 0.0
    _, recalls, precisions = _curve_points(flags, num_gt)

    if interpolation == "11point":
        total = 0.0
        for k in range(11):
            t = k / 10
            best = 0.0
            for r, p in zip(recalls, precisions):
                if r >= t and p > best:
                    best = p
            total += best
        return total / 11

    envelope = precisions[:]
    for i in range(len(envelope) - 2, -1, -1):
        if envelope[i] < envelope[i + 1]:
            envelope[i] = envelope[i + 1]
    ap = 0.0
    prev_recall = 0.0
    for i in range(len(flags)):
        if recalls[i] > prev_recall:
            ap += (recalls[i] - prev_recall) * envelope[i]
            prev_recall = recalls[i]
    return ap


def pr_curve(scored_flags: Sequence[tuple[float, bool]], num_gt: int) -> PRCurve:
    flags = sorted(scored_flags, key=lambda sf: -sf[0])
    scores, recalls, precisions = _curve_points(flags, num_gt)
    return PRCurve(points=tuple(zip(scores, recalls, precisions)), num_ground_truth=num_gt)


def _match_flags(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthObject],
    config: MetricConfig,
    eligibility=None,
) -> tuple[list[tuple[float, bool]], int]:
    """Greedy-match sorted detections and return ((score, matched) flags in
    rank order, number of matched ground truths)."""
    dets = _sorted_by_score(detections)
    result = greedy_match(dets, ground_truths, config.iou_threshold, eligibility, strict=config.strict_iou)
    flags = [(d.score, result.detection_to_gt[i] is not None) for i, d in enumerate(dets)]
    return flags, result.num_matched


def map_known(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthObject],
    partition: ClassPartition,
    config: MetricConfig,
) -> tuple[float, dict[int, PRCurve]]:
    """Mean AP over known classes with at least one ground truth in the split.

    Unknown-labeled detections are invisible here; ground truths of unknown
    classes are not matchable, so known detections sitting on them count as
    false positives for their own class.
    """
    if not partition.known:
        raise ValueError("partition has an empty known set")
    aps: list[float] = []
    curves: dict[int, PRCurve] = {}
    for class_id in partition.known:
        gts_c = [g for g in ground_truths if g.class_id == class_id]
        if not gts_c:
            continue
        dets_c = [d for d in detections if d.class_id == class_id]
        flags, _ = _match_flags(dets_c, gts_c, config)
        aps.append(average_precision(flags, len(gts_c), config.interpolation))
        curves[class_id] = pr_curve(flags, len(gts_c))
    if not aps:
        raise UndefinedMetricError("no known-class ground truths in this split")
    return sum(aps) / len(aps), curves


def ap_unknown(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthObject],
    partition: ClassPartition,
    config: MetricConfig,
) -> tuple[float, PRCurve]:
    """AP of the collapsed unknown class: only unknown-labeled detections
    participate and only unknown-class ground truths are matchable."""
    dets_u = [d for d in detections if d.class_id == partition.unknown_label]
    gts_u = [g for g in ground_truths if partition.is_unknown_class(g.class_id)]
    flags, _ = _match_flags(dets_u, gts_u, config)
    return average_precision(flags, len(gts_u), config.interpolation), pr_curve(flags, len(gts_u))


def ap_all(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthObject],
    config: MetricConfig,
) -> tuple[float, PRCurve]:
    """Class-agnostic AP: every detection may match every ground truth,
    regardless of labels. Pure localization quality."""
    flags, _ = _match_flags(detections, ground_truths, config)
    return average_precision(flags, len(ground_truths), config.interpolation), pr_curve(
        flags, len(ground_truths)
    )


def ap_superclass(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthObject],
    taxonomy: Taxonomy,
    partition: ClassPartition,
    config: MetricConfig,
) -> tuple[float, PRCurve, SuperClassCounts]:
    """Super-class-aware AP on a pure-OOD split.

    A detection is a true positive when it overlaps a remaining unknown ground
    truth and is either unknown-labeled or a known class under the same
    super-class; otherwise it is a false positive. Ground truths left
    unmatched (including those covered only by wrong-super-class detections)
    are false negatives.
    """
    for g in ground_truths:
        if not partition.is_unknown_class(g.class_id):
            raise PreconditionError(
                f"super-class AP requires a pure-OOD split; ground truth of known class {g.class_id} present"
            )
        taxonomy.superclass_of(g.class_id)  # raises TaxonomyError when missing

    def eligible(det: Detection, gt: GroundTruthObject) -> bool:
        if det.class_id == partition.unknown_label:
            return True
        return taxonomy.superclass_of(det.class_id) == taxonomy.superclass_of(gt.class_id)

    flags, matched = _match_flags(detections, ground_truths, config, eligible)
    num_gt = len(ground_truths)
    counts = SuperClassCounts(tp=matched, fp=len(flags) - matched, fn=num_gt - matched)
    return (
        average_precision(flags, num_gt, config.interpolation),
        pr_curve(flags, num_gt),
        counts,
    )


def u_recall(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthObject],
    partition: ClassPartition,
    config: MetricConfig,
) -> float:
    """Fraction of unknown ground truths recovered by unknown-labeled
    detections with score >= tau."""
    gts_u = [g for g in ground_truths if partition.is_unknown_class(g.class_id)]
    if not gts_u:
        raise UndefinedMetricError("U-Recall is undefined without unknown ground truths")
    dets_u = [
        d
        for d in detections
        if d.class_id == partition.unknown_label and d.score >= config.score_threshold
    ]
    _, matched = _match_flags(dets_u, gts_u, config)
    return matched / len(gts_u)


def a_ose(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthObject],
    partition: ClassPartition,
    config: MetricConfig,
) -> int:
    """Absolute open-set error: the number of unknown ground truths matched
    by known-labeled detections with score >= tau. Matching is injective, so
    stacked detections on one object count once."""
    gts_u = [g for g in ground_truths if partition.is_unknown_class(g.class_id)]
    dets_k = [
        d for d in detections if partition.is_known(d.class_id) and d.score >= config.score_threshold
    ]
    _, matched = _match_flags(dets_k, gts_u, config)
    return matched


def wilderness_impact(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthObject],
    partition: ClassPartition,
    config: MetricConfig,
) -> float:
    """Proportion of open-set errors among known-labeled detections above tau."""
    n_known = sum(
        1 for d in detections if partition.is_known(d.class_id) and d.score >= config.score_threshold
    )
    if n_known == 0:
        raise UndefinedMetricError("wilderness impact is undefined without known detections above tau")
    return a_ose(detections, ground_truths, partition, config) / n_known


def _validate_inputs(
    dataset: Dataset, detections: Sequence[Detection], partition: ClassPartition
) -> None:
    image_ids = {img.id for img in dataset.images}
    for g in dataset.ground_truths:
        if not partition.resolvable(g.class_id):
            raise ValueError(f"ground-truth class {g.class_id} is not in the partition")
    for d in detections:
        if d.image_id not in image_ids:
            raise ValueError(f"detection references unknown image {d.image_id}")
        if not (partition.is_known(d.class_id) or d.class_id == partition.unknown_label):
            raise ValueError(
                f"detection class {d.class_id} is neither known nor the unknown label"
            )


def evaluate(
    dataset: Dataset,
    detections: Sequence[Detection],
    taxonomy: Taxonomy | None,
    partition: ClassPartition,
    splits: SplitSet,
    config: MetricConfig,
    split_names: Sequence[str] = SPLIT_NAMES,
) -> EvalReport:
    """Run the full metric suite on the requested test splits.

    Per split: "id" gets mAP over known classes; "all" adds unknown AP,
    class-agnostic AP, U-Recall, and A-OSE; "ood" swaps mAP for super-class AP
    (computed only when a taxonomy is supplied). Wilderness impact is added to
    "all" and "ood" when the config asks for it. Metrics that are undefined on
    a split are reported as null with a note. Output is deterministic.
    """
    _validate_inputs(dataset, detections, partition)
    for name in split_names:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split name {name!r}")

    split_images = {
        "id": splits.id_images,
        "ood": splits.ood_images,
        "all": splits.all_images,
    }
    report_splits: dict[str, dict] = {}
    curves: dict[str, dict] = {}
    notes: list[str] = []

    for name in SPLIT_NAMES:
        if name not in split_names:
            continue
        images = split_images[name]
        gts = [g for g in dataset.ground_truths if g.image_id in images]
        dets = [d for d in detections if d.image_id in images]
        values: dict[str, float | int | None] = {}
        split_curves: dict[str, dict] = {}

        def attempt(metric: str, fn):
            try:
                values[metric] = fn()
            except UndefinedMetricError as exc:
                values[metric] = None
                notes.append(f"{name}: {metric} undefined ({exc})")

        if name in ("id", "all"):
            def _map():
                value, per_class = map_known(dets, gts, partition, config)
                for cid, curve in sorted(per_class.items()):
                    split_curves[f"class_{cid}"] = curve.to_doc()
                return value

            attempt("map_known", _map)
        if name in ("all", "ood"):
            apu, curve_u = ap_unknown(dets, gts, partition, config)
            values["ap_unknown"] = apu
            split_curves["ap_unknown"] = curve_u.to_doc()
            apa, curve_a = ap_all(dets, gts, config)
            values["ap_all"] = apa
            split_curves["ap_all"] = curve_a.to_doc()
            attempt("u_recall", lambda: u_recall(dets, gts, partition, config))
            values["a_ose"] = a_ose(dets, gts, partition, config)
            if config.compute_wi:
                attempt("wilderness_impact", lambda: wilderness_impact(dets, gts, partition, config))
                if name == "ood":
                    notes.append(
                        "ood: wilderness impact on a pure-OOD split has no known objects to protect;"
                        " value reported for completeness"
                    )
        if name == "ood":
            if taxonomy is not None:
                apsc, curve_sc, _ = ap_superclass(dets, gts, taxonomy, partition, config)
                values["ap_superclass"] = apsc
                split_curves["ap_superclass"] = curve_sc.to_doc()
            else:
                notes.append("ood: ap_superclass skipped (no taxonomy supplied)")

        report_splits[name] = values
        curves[name] = split_curves

    return EvalReport(
        config=config.resolved(),
        splits=report_splits,
        pr_curves=curves,
        notes=notes,
        tau_sweep={},
    )


def tau_sweep_rows(
    dataset: Dataset,
    detections: Sequence[Detection],
    partition: ClassPartition,
    splits: SplitSet,
    config: MetricConfig,
    taus: Sequence[float],
    split_names: Sequence[str] = ("all", "ood"),
) -> dict:
    """Recompute the tau-dependent metrics (A-OSE, U-Recall, and wilderness
    impact when enabled) for each requested threshold."""
    split_images = {"id": splits.id_images, "ood": splits.ood_images, "all": splits.all_images}
    rows: dict[str, dict] = {}
    for tau in taus:
        cfg = replace(config, score_threshold=tau)
        per_split: dict[str, dict] = {}
        for name in split_names:
            gts = [g for g in dataset.ground_truths if g.image_id in split_images[name]]
            dets = [d for d in detections if d.image_id in split_images[name]]
            row: dict[str, float | int | None] = {"a_ose": a_ose(dets, gts, partition, cfg)}
            try:
                row["u_recall"] = u_recall(dets, gts, partition, cfg)
            except UndefinedMetricError:
                row["u_recall"] = None
            if cfg.compute_wi:
                try:
                    row["wilderness_impact"] = wilderness_impact(dets, gts, partition, cfg)
                except UndefinedMetricError:
                    row["wilderness_impact"] = None
            per_split[name] = row
        rows[repr(tau)] = per_split
    return rows
