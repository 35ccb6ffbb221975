"""Benchmark construction: test-set segmentation, road-image selection,
hierarchical known/unknown class partitioning, and scenario validation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .data_model import ClassPartition, Dataset, Taxonomy
from .errors import ParseError

log = logging.getLogger(__name__)

# Default selection predicate for road scenes: keep images showing traffic
# infrastructure, drop anything carrying indoor content.
DEFAULT_TRIGGER_SUPERCLASSES = ("vehicle", "street sign")
DEFAULT_INDOOR_SUPERCLASSES = (
    "home appliance",
    "plumbing fixture",
    "office supplies",
    "kitchenware",
    "furniture",
    "bathroom accessory",
    "drink",
    "food",
    "cosmetics",
    "personal care",
    "medical equipment",
    "musical instrument",
    "computer electronics",
)


@dataclass(frozen=True)
class SplitSet:
    """Test-set segmentation by object content. ``id_images`` hold only known
    objects, ``ood_images`` only unknown objects; images mixing both kinds or
    containing nothing appear in ``all_images`` alone."""

    id_images: frozenset
    ood_images: frozenset
    all_images: frozenset

    def __post_init__(self) -> None:
        if self.id_images & self.ood_images:
            raise ValueError("id and ood image sets must be disjoint")
        if not (self.id_images | self.ood_images) <= self.all_images:
            raise ValueError("id and ood image sets must be subsets of all_images")

    def to_doc(self) -> dict:
        return {
            "id_images": sorted(self.id_images),
            "ood_images": sorted(self.ood_images),
            "all_images": sorted(self.all_images),
        }

    @classmethod
    def from_doc(cls, doc: Mapping) -> "SplitSet":
        return cls(
            id_images=frozenset(doc["id_images"]),
            ood_images=frozenset(doc["ood_images"]),
            all_images=frozenset(doc["all_images"]),
        )


@dataclass
class ScenarioReport:
    """Outcome of checking a claimed training scenario against the labels."""

    scenario: str
    violations: list[tuple[int | str, int]]
    note: str = ""

    @property
    def verified(self) -> bool:
        return self.scenario != "unseen" or not self.violations


@dataclass
class SplitStatistics:
    image_count: int
    object_count: int
    known_class_count: int
    unknown_class_count: int
    per_superclass: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "image_count": self.image_count,
            "object_count": self.object_count,
            "known_class_count": self.known_class_count,
            "unknown_class_count": self.unknown_class_count,
            "per_superclass": self.per_superclass,
        }


def segment_test_splits(test_dataset: Dataset, partition: ClassPartition) -> SplitSet:
    """Assign each test image to the pure-known, pure-unknown, or mixed bucket."""
    id_images, ood_images, all_images = set(), set(), set()
    gts_by_image = test_dataset.ground_truths_by_image()
    for image_id, gts in gts_by_image.items():
        all_images.add(image_id)
        if not gts:
            continue
        kinds = set()
        for g in gts:
            if partition.is_known(g.class_id):
                kinds.add("known")
            elif partition.is_unknown_class(g.class_id):
                kinds.add("unknown")
            else:
                raise ValueError(
                    f"image {image_id}: class {g.class_id} cannot be resolved against the partition"
                )
        if kinds == {"known"}:
            id_images.add(image_id)
        elif kinds == {"unknown"}:
            ood_images.add(image_id)
    return SplitSet(
        id_images=frozenset(id_images),
        ood_images=frozenset(ood_images),
        all_images=frozenset(all_images),
    )


def select_road_images(
    dataset: Dataset,
    taxonomy: Taxonomy,
    trigger_superclasses: Sequence[str] = DEFAULT_TRIGGER_SUPERCLASSES,
    excluded_superclasses: Sequence[str] = DEFAULT_INDOOR_SUPERCLASSES,
) -> set:
    """Keep images holding at least one object under a trigger super-class and
    none under an excluded super-class."""
    trigger_ids = {taxonomy.superclass_id(n) for n in trigger_superclasses}
    excluded_ids = {taxonomy.superclass_id(n) for n in excluded_superclasses}
    selected = set()
    for image_id, gts in dataset.ground_truths_by_image().items():
        supers = {taxonomy.superclass_of(g.class_id) for g in gts}
        if supers & trigger_ids and not supers & excluded_ids:
            selected.add(image_id)
    return selected


def partition_classes(
    class_instance_counts: Mapping[int, int],
    taxonomy: Taxonomy,
    frac: float = 0.5,
    min_instances: int = 60,
    unknown_label: int | None = None,
) -> ClassPartition:
    """Split every super-class into known and unknown classes.

    Within each super-class independently, classes are ranked by descending
    instance count (ties go to the lower class id); the top ``floor(frac * n)``
    ranked classes that also reach ``min_instances`` become known, everything
    else unknown. The result depends only on the counts and the taxonomy.
    """
    if not 0.0 <= frac <= 1.0:
        raise ValueError(f"frac must be in [0, 1], got {frac}")
    if min_instances < 0:
        raise ValueError(f"min_instances must be >= 0, got {min_instances}")
    for class_id, count in class_instance_counts.items():
        if count < 0:
            raise ValueError(f"negative count for class {class_id}")
        if class_id not in taxonomy.classes:
            raise ValueError(f"counted class {class_id} is not in the taxonomy")

    known: list[int] = []
    unknown: list[int] = []
    for sid in range(len(taxonomy.superclass_names)):
        members = taxonomy.classes_of_superclass(sid)
        if not members:
            log.warning("super-class %r has no classes; skipped", taxonomy.superclass_names[sid])
            continue
        ranked = sorted(members, key=lambda c: (-class_instance_counts.get(c, 0), c))
        slots = math.floor(frac * len(ranked))
        for rank, class_id in enumerate(ranked):
            if rank < slots and class_instance_counts.get(class_id, 0) >= min_instances:
                known.append(class_id)
            else:
                unknown.append(class_id)
    return ClassPartition.create(known=known, unknown=unknown, unknown_label=unknown_label)


def class_instance_counts(dataset: Dataset) -> dict[int, int]:
    counts: dict[int, int] = {}
    for g in dataset.ground_truths:
        counts[g.class_id] = counts.get(g.class_id, 0) + 1
    return counts


def validate_scenario(
    train_dataset: Dataset, partition: ClassPartition, claimed: str
) -> ScenarioReport:
    """List every unknown-class annotation occurring in the training set.

    The "unseen" claim holds iff that list is empty; both outcomes assume the
    training annotations are exhaustive, since an unlabeled object is by
    definition invisible to a label-level check.
    """
    if claimed not in ("unseen", "unlabeled"):
        raise ValueError(f"scenario must be 'unseen' or 'unlabeled', got {claimed!r}")
    violations = [
        (g.image_id, g.class_id)
        for g in train_dataset.ground_truths
        if partition.is_unknown_class(g.class_id)
    ]
    if claimed == "unlabeled":
        note = (
            "unlabeled scenario: unknown objects may appear without annotations;"
            " label-level checks cannot detect them"
        )
        return ScenarioReport(scenario=claimed, violations=violations, note=note)
    note = "unseen check assumes training annotations are exhaustive"
    return ScenarioReport(scenario=claimed, violations=violations, note=note)


def split_statistics(
    dataset: Dataset, partition: ClassPartition, taxonomy: Taxonomy | None = None
) -> SplitStatistics:
    """Dataset-level counts used to sanity-check a constructed benchmark."""
    per_superclass: dict[str, dict] = {}
    if taxonomy is not None:
        counts = class_instance_counts(dataset)
        for sid, name in enumerate(taxonomy.superclass_names):
            members = taxonomy.classes_of_superclass(sid)
            per_superclass[name] = {
                "classes": len(members),
                "known_classes": sum(1 for c in members if partition.is_known(c)),
                "unknown_classes": sum(1 for c in members if partition.is_unknown_class(c)),
                "instances": sum(counts.get(c, 0) for c in members),
            }
    return SplitStatistics(
        image_count=len(dataset.images),
        object_count=len(dataset.ground_truths),
        known_class_count=len(partition.known),
        unknown_class_count=len(partition.unknown),
        per_superclass=per_superclass,
    )


@dataclass(frozen=True)
class SplitRecipe:
    """Declarative input of the split builder."""

    triggers: tuple[str, ...] = DEFAULT_TRIGGER_SUPERCLASSES
    exclusions: tuple[str, ...] = DEFAULT_INDOOR_SUPERCLASSES
    frac: float = 0.5
    min_instances: int = 60
    part_class_exclusions: tuple[str, ...] = ()

    @classmethod
    def from_doc(cls, doc: Mapping) -> "SplitRecipe":
        return cls(
            triggers=tuple(doc.get("triggers", DEFAULT_TRIGGER_SUPERCLASSES)),
            exclusions=tuple(doc.get("exclusions", DEFAULT_INDOOR_SUPERCLASSES)),
            frac=float(doc.get("frac", 0.5)),
            min_instances=int(doc.get("min_instances", 60)),
            part_class_exclusions=tuple(doc.get("part_class_exclusions", ())),
        )


def load_recipe(path: str | Path) -> SplitRecipe:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected a recipe object")
    return SplitRecipe.from_doc(doc)


def resolve_class_names(taxonomy: Taxonomy, names: Iterable[str]) -> set[int]:
    """Resolve a mixed list of class and super-class names to class ids.

    A name matching a super-class expands to all its member classes.
    """
    ids: set[int] = set()
    for name in names:
        if name in taxonomy.superclass_names:
            ids.update(taxonomy.classes_of_superclass(taxonomy.superclass_id(name)))
        else:
            ids.add(taxonomy.class_id_by_name(name))
    return ids


def drop_classes(dataset: Dataset, class_ids: Iterable[int]) -> Dataset:
    """Dataset copy with every annotation of the given classes removed."""
    drop = set(class_ids)
    return Dataset(
        images=dataset.images,
        ground_truths=[g for g in dataset.ground_truths if g.class_id not in drop],
        taxonomy=dataset.taxonomy.without_classes(drop) if dataset.taxonomy else None,
        category_names={c: n for c, n in dataset.category_names.items() if c not in drop},
        load_report=dataset.load_report,
    )


def restrict_to_images(dataset: Dataset, image_ids: set) -> Dataset:
    """Dataset copy containing only the given images and their annotations."""
    return Dataset(
        images=[img for img in dataset.images if img.id in image_ids],
        ground_truths=[g for g in dataset.ground_truths if g.image_id in image_ids],
        taxonomy=dataset.taxonomy,
        category_names=dataset.category_names,
        load_report=dataset.load_report,
    )


def write_partition(partition: ClassPartition, path: str | Path) -> None:
    doc = {
        "known": sorted(partition.known),
        "unknown": sorted(partition.unknown),
        "unknown_label": partition.unknown_label,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_partition(path: str | Path) -> ClassPartition:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return ClassPartition.create(
            known=doc["known"], unknown=doc["unknown"], unknown_label=doc.get("unknown_label")
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed partition document ({exc})") from None


def write_splits(splits: SplitSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(splits.to_doc(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_splits(path: str | Path) -> SplitSet:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return SplitSet.from_doc(doc)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed split document ({exc})") from None
