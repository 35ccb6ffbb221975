"""Domain types and parsers for annotations, detections, and taxonomies.

Annotation and detection files use COCO conventions: boxes are stored as
``[x, y, width, height]`` and converted to corner form ``(x_min, y_min,
x_max, y_max)`` on load, which is what all matching code operates on.
Parsers are pure functions; parsed objects are treated as immutable and are
safe to share across workers.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ParseError, TaxonomyError

log = logging.getLogger(__name__)

UNKNOWN_CLASS_NAME = "unknown"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in corner form, pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not math.isfinite(v):
                raise ValueError(f"box coordinates must be finite, got {self!r}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"box must have positive area, got {self!r}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]


@dataclass(frozen=True)
class GroundTruthObject:
    """One annotated object: image reference, original class id, box."""

    image_id: int | str
    class_id: int
    box: BoundingBox


@dataclass(frozen=True)
class Detection:
    """One detector output. ``class_id`` is a known class id or the reserved
    unknown label of the active :class:`ClassPartition`."""

    image_id: int | str
    class_id: int
    score: float
    box: BoundingBox

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ImageRecord:
    id: int | str
    width: int | None = None
    height: int | None = None


@dataclass(frozen=True)
class Taxonomy:
    """Total mapping from class ids to contiguous super-class ids 0..L."""

    class_to_superclass: Mapping[int, int]
    superclass_names: tuple[str, ...]
    class_names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for cid, sid in self.class_to_superclass.items():
            if not 0 <= sid < len(self.superclass_names):
                raise ValueError(
                    f"class {cid} maps to super-class {sid}, outside 0..{len(self.superclass_names) - 1}"
                )

    @property
    def classes(self) -> set[int]:
        return set(self.class_to_superclass)

    def superclass_of(self, class_id: int) -> int:
        try:
            return self.class_to_superclass[class_id]
        except KeyError:
            raise TaxonomyError(f"class id {class_id} is not in the taxonomy") from None

    def superclass_id(self, name: str) -> int:
        try:
            return self.superclass_names.index(name)
        except ValueError:
            raise TaxonomyError(f"super-class {name!r} is not in the taxonomy") from None

    def classes_of_superclass(self, superclass: int) -> list[int]:
        return sorted(c for c, s in self.class_to_superclass.items() if s == superclass)

    def class_id_by_name(self, name: str) -> int:
        for cid, cname in self.class_names.items():
            if cname == name:
                return cid
        raise TaxonomyError(f"class {name!r} is not in the taxonomy")

    def without_classes(self, class_ids: Iterable[int]) -> "Taxonomy":
        """Copy of this taxonomy with the given classes removed (super-class
        ids are preserved; emptied super-classes remain listed)."""
        drop = set(class_ids)
        return Taxonomy(
            class_to_superclass={c: s for c, s in self.class_to_superclass.items() if c not in drop},
            superclass_names=self.superclass_names,
            class_names={c: n for c, n in self.class_names.items() if c not in drop},
        )


@dataclass(frozen=True)
class ClassPartition:
    """Known/unknown class split. Unknown classes keep their original ids in
    ground truth but are collapsed to the single reserved ``unknown_label``
    for detection outputs."""

    known: tuple[int, ...]
    unknown: frozenset[int]
    unknown_label: int

    def __post_init__(self) -> None:
        overlap = set(self.known) & self.unknown
        if overlap:
            raise ValueError(f"classes on both sides of the partition: {sorted(overlap)}")
        if self.unknown_label in self.known or self.unknown_label in self.unknown:
            raise ValueError(f"unknown_label {self.unknown_label} collides with a real class id")

    @classmethod
    def create(
        cls,
        known: Iterable[int],
        unknown: Iterable[int],
        unknown_label: int | None = None,
    ) -> "ClassPartition":
        known_t = tuple(sorted(set(known)))
        unknown_s = frozenset(unknown)
        if unknown_label is None:
            # C+1 when ids are contiguous; bumped past every id on collision.
            candidate = (max(known_t) if known_t else 0) + 1
            if candidate in unknown_s:
                candidate = max({*known_t, *unknown_s}) + 1
            unknown_label = candidate
        return cls(known=known_t, unknown=unknown_s, unknown_label=unknown_label)

    def is_known(self, class_id: int) -> bool:
        return class_id in self.known

    def is_unknown_class(self, class_id: int) -> bool:
        return class_id in self.unknown

    def resolvable(self, class_id: int) -> bool:
        return class_id in self.known or class_id in self.unknown


@dataclass
class LoadReport:
    """Records noisy annotation records handled at load time instead of crashing."""

    rejected: list[str] = field(default_factory=list)
    clamped: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.rejected and not self.clamped


@dataclass
class Dataset:
    """A loaded annotation dump. Treated as read-only after construction."""

    images: list[ImageRecord]
    ground_truths: list[GroundTruthObject]
    taxonomy: Taxonomy | None = None
    category_names: dict[int, str] = field(default_factory=dict)
    load_report: LoadReport = field(default_factory=LoadReport)

    def images_by_id(self) -> dict[int | str, ImageRecord]:
        return {img.id: img for img in self.images}

    def ground_truths_by_image(self) -> dict[int | str, list[GroundTruthObject]]:
        out: dict[int | str, list[GroundTruthObject]] = {img.id: [] for img in self.images}
        for gt in self.ground_truths:
            out[gt.image_id].append(gt)
        return out


def _load_json(path: str | Path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from exc


def parse_annotations(path: str | Path) -> Dataset:
    """Load a COCO-style annotation document.

    Boxes are converted from ``[x, y, w, h]`` storage form to corner form.
    Degenerate boxes (non-positive width or height, or boxes entirely outside
    their image) are rejected with an entry in ``Dataset.load_report`` rather
    than raising; boxes poking past image bounds are clamped with a warning.
    An annotation referencing a missing image is a hard error.
    """
    doc = _load_json(path)
    if not isinstance(doc, dict) or "images" not in doc:
        raise ParseError(f"{path}: expected an object with an 'images' section")

    images: list[ImageRecord] = []
    for rec in doc["images"]:
        if "id" not in rec:
            raise ParseError(f"{path}: image record without an id: {rec!r}")
        images.append(ImageRecord(id=rec["id"], width=rec.get("width"), height=rec.get("height")))
    by_id = {img.id: img for img in images}
    if len(by_id) != len(images):
        raise ParseError(f"{path}: duplicate image ids")

    report = LoadReport()
    ground_truths: list[GroundTruthObject] = []
    for rec in doc.get("annotations", []):
        ann_id = rec.get("id", "<no id>")
        try:
            image_id = rec["image_id"]
            class_id = rec["category_id"]
            bbox = rec["bbox"]
        except KeyError as exc:
            raise ParseError(f"annotation {ann_id}: missing field {exc}") from None
        if image_id not in by_id:
            raise ParseError(f"annotation {ann_id} references missing image {image_id}")
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise ParseError(f"annotation {ann_id}: bbox must be [x, y, width, height]")
        x, y, w, h = (float(v) for v in bbox)
        if not all(math.isfinite(v) for v in (x, y, w, h)):
            report.rejected.append(f"annotation {ann_id}: non-finite bbox {bbox}")
            continue
        if w <= 0 or h <= 0:
            report.rejected.append(f"annotation {ann_id}: non-positive bbox size {bbox}")
            continue
        x0, y0, x1, y1 = x, y, x + w, y + h
        img = by_id[image_id]
        if img.width is not None and img.height is not None:
            cx0 = min(max(x0, 0.0), float(img.width))
            cy0 = min(max(y0, 0.0), float(img.height))
            cx1 = min(max(x1, 0.0), float(img.width))
            cy1 = min(max(y1, 0.0), float(img.height))
            if cx1 <= cx0 or cy1 <= cy0:
                report.rejected.append(f"annotation {ann_id}: box entirely outside image {image_id}")
                continue
            if (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1):
                report.clamped.append(f"annotation {ann_id}: box clamped to image {image_id} bounds")
                log.warning("annotation %s: box clamped to image %s bounds", ann_id, image_id)
            x0, y0, x1, y1 = cx0, cy0, cx1, cy1
        ground_truths.append(
            GroundTruthObject(image_id=image_id, class_id=int(class_id), box=BoundingBox(x0, y0, x1, y1))
        )

    category_names: dict[int, str] = {}
    supercats: dict[int, str] = {}
    for cat in doc.get("categories", []):
        if "id" not in cat:
            raise ParseError(f"{path}: category record without an id: {cat!r}")
        category_names[int(cat["id"])] = cat.get("name", str(cat["id"]))
        if isinstance(cat.get("supercategory"), str) and cat["supercategory"]:
            supercats[int(cat["id"])] = cat["supercategory"]

    taxonomy = None
    if category_names and set(supercats) == set(category_names):
        taxonomy = build_taxonomy(
            (cid, category_names[cid], supercats[cid]) for cid in sorted(category_names)
        )

    return Dataset(
        images=images,
        ground_truths=ground_truths,
        taxonomy=taxonomy,
        category_names=category_names,
        load_report=report,
    )


def parse_detections(
    path: str | Path,
    partition: ClassPartition | None = None,
    taxonomy: Taxonomy | None = None,
) -> list[Detection]:
    """Load a COCO-results-style detection list, preserving record order.

    When a partition is supplied, category ids must be known class ids or the
    partition's reserved unknown label; with only a taxonomy, ids must be
    taxonomy classes. Scores outside [0, 1] and degenerate boxes are errors.
    """
    doc = _load_json(path)
    if not isinstance(doc, list):
        raise ParseError(f"{path}: expected a list of detection records")

    detections: list[Detection] = []
    for i, rec in enumerate(doc):
        try:
            image_id = rec["image_id"]
            class_id = int(rec["category_id"])
            bbox = rec["bbox"]
            score = float(rec["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"detection {i}: malformed record ({exc})") from None
        if not (0.0 <= score <= 1.0):
            raise ParseError(f"detection {i}: score {score} outside [0, 1]")
        if partition is not None:
            if not (partition.is_known(class_id) or class_id == partition.unknown_label):
                raise ParseError(
                    f"detection {i}: category id {class_id} is neither a known class "
                    f"nor the unknown label {partition.unknown_label}"
                )
        elif taxonomy is not None and class_id not in taxonomy.classes:
            raise ParseError(f"detection {i}: category id {class_id} is not in the taxonomy")
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise ParseError(f"detection {i}: bbox must be [x, y, width, height]")
        x, y, w, h = (float(v) for v in bbox)
        if not all(math.isfinite(v) for v in (x, y, w, h)) or w <= 0 or h <= 0:
            raise ParseError(f"detection {i}: degenerate bbox {bbox}")
        detections.append(
            Detection(image_id=image_id, class_id=class_id, score=score, box=BoundingBox.from_xywh(x, y, w, h))
        )
    return detections


def build_taxonomy(entries: Iterable[tuple[int, str, str]]) -> Taxonomy:
    """Build a Taxonomy from (class_id, class_name, superclass_name) entries.

    Super-class ids are assigned contiguously in order of first appearance.
    A class listed twice with conflicting super-classes is an error, as is the
    reserved class name "unknown".
    """
    class_to_super: dict[int, int] = {}
    class_names: dict[int, str] = {}
    super_ids: dict[str, int] = {}
    for class_id, class_name, superclass_name in entries:
        if not superclass_name:
            raise ParseError(f"class {class_id} ({class_name!r}): empty super-class reference")
        if class_name == UNKNOWN_CLASS_NAME:
            raise ParseError(f"class {class_id}: {UNKNOWN_CLASS_NAME!r} is a reserved label")
        sid = super_ids.setdefault(superclass_name, len(super_ids))
        if class_id in class_to_super and class_to_super[class_id] != sid:
            raise ParseError(
                f"class {class_id} ({class_name!r}) listed under two super-classes"
            )
        class_to_super[class_id] = sid
        class_names[class_id] = class_name
    names = tuple(sorted(super_ids, key=super_ids.get))
    return Taxonomy(class_to_superclass=class_to_super, superclass_names=names, class_names=class_names)


def parse_taxonomy(path: str | Path) -> Taxonomy:
    """Load a taxonomy document: a list of entries
    ``{class_id, class_name, superclass_name}`` (optionally wrapped in an
    object under an "entries" key)."""
    doc = _load_json(path)
    if isinstance(doc, dict):
        doc = doc.get("entries")
    if not isinstance(doc, list):
        raise ParseError(f"{path}: expected a list of taxonomy entries")
    entries = []
    for i, rec in enumerate(doc):
        try:
            entries.append((int(rec["class_id"]), str(rec["class_name"]), rec["superclass_name"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"taxonomy entry {i}: malformed record ({exc})") from None
    return build_taxonomy(entries)
