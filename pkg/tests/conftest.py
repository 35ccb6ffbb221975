import json

import numpy as np
import pytest
from hypothesis import settings

from osodbench import (
    AttentionStack,
    BoundingBox,
    ClassPartition,
    Detection,
    FeatureMap,
    GroundTruthObject,
    Taxonomy,
    write_tensor_file,
)

settings.register_profile("suite", derandomize=True, max_examples=60)
settings.load_profile("suite")

UNKNOWN_LABEL = 99

# Shared toy taxonomy: knowns 1..3, unknowns 11..13, three super-classes.
TOY_SUPERS = {1: 0, 2: 0, 11: 0, 3: 1, 12: 1, 13: 2}
TOY_NAMES = {1: "car", 2: "bus", 3: "stop sign", 11: "helicopter", 12: "billboard", 13: "dog"}


@pytest.fixture
def toy_taxonomy():
    return Taxonomy(
        class_to_superclass=TOY_SUPERS,
        superclass_names=("vehicle", "street sign", "animal"),
        class_names=TOY_NAMES,
    )


@pytest.fixture
def toy_partition():
    return ClassPartition.create(known=[1, 2, 3], unknown=[11, 12, 13], unknown_label=UNKNOWN_LABEL)


def det(image, cls, score, box):
    return Detection(image_id=image, class_id=cls, score=score, box=BoundingBox(*box))


def gt(image, cls, box):
    return GroundTruthObject(image_id=image, class_id=cls, box=BoundingBox(*box))


def write_annotations(path, images, annotations, categories=None):
    doc = {
        "images": [{"id": i, "width": w, "height": h} for i, w, h in images],
        "annotations": [
            {"id": k + 1, "image_id": img, "category_id": cls, "bbox": list(bbox)}
            for k, (img, cls, bbox) in enumerate(annotations)
        ],
        "categories": categories or [],
    }
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def write_detections(path, detections):
    doc = [
        {"image_id": img, "category_id": cls, "bbox": list(bbox), "score": score}
        for img, cls, score, bbox in detections
    ]
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def write_taxonomy_file(path, entries):
    doc = [
        {"class_id": cid, "class_name": name, "superclass_name": sup} for cid, name, sup in entries
    ]
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def write_partition_file(path, known, unknown, unknown_label=UNKNOWN_LABEL):
    path.write_text(
        json.dumps({"known": known, "unknown": unknown, "unknown_label": unknown_label}),
        encoding="utf-8",
    )
    return path


BLOB_ROWS = (4, 8)  # half-open patch-row range of the planted blob
BLOB_COLS = (5, 9)
BLOB_STRIDE = 14
BLOB_PIXEL_BOX = (
    BLOB_COLS[0] * BLOB_STRIDE,
    BLOB_ROWS[0] * BLOB_STRIDE,
    BLOB_COLS[1] * BLOB_STRIDE,
    BLOB_ROWS[1] * BLOB_STRIDE,
)  # (70, 56, 126, 112)


def blob_feature_map(dim=8, grid=16):
    """Uniform background features plus one well-separated blob region."""
    values = np.zeros((grid, grid, dim), dtype=np.float32)
    values[BLOB_ROWS[0]:BLOB_ROWS[1], BLOB_COLS[0]:BLOB_COLS[1], 0] = 100.0
    return FeatureMap(values=values, patch_stride=BLOB_STRIDE)


def blob_attention(heads=2, grid=16, uniform=False):
    maps = np.ones((heads, grid, grid), dtype=np.float32)
    if not uniform:
        maps[:, BLOB_ROWS[0]:BLOB_ROWS[1], BLOB_COLS[0]:BLOB_COLS[1]] = 10.0
    return AttentionStack(maps=maps, patch_stride=BLOB_STRIDE)


BLOB_PARAMS = dict(
    eps=1.0,
    min_samples=10,
    merge_threshold=50.0,
    max_regions=3,
    gt_overlap_max=0.3,
    nms_threshold=0.5,
)


def write_blob_tensors(tensor_dir, image_id, uniform_attention=False):
    tensor_dir.mkdir(parents=True, exist_ok=True)
    write_tensor_file(blob_feature_map(), tensor_dir / f"{image_id}.feat")
    write_tensor_file(blob_attention(uniform=uniform_attention), tensor_dir / f"{image_id}.attn")
