"""Unknown-object pseudo-labeling over exported ViT feature/attention tensors.

The per-image pipeline: density-cluster the patch features, drop the biggest
cluster as background, re-segment the foreground with Ward-linkage
agglomerative clustering cut at a distance threshold, clean cluster masks
with a morphological opening, keep only clusters whose mean attention beats
the image-wide mean, box the largest connected regions of each kept cluster,
then NMS the candidates and drop any box overlapping a ground truth.

Clustering is implemented with exact neighborhood search; patch grids are a
few thousand points at most and correctness beats speed here. Every stage is
a pure function, so per-image runs parallelize trivially and deterministically.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import cdist

from .data_model import BoundingBox, Dataset, GroundTruthObject
from .errors import ParseError
from .matching import iou, nms
from .ostf import AttentionStack, FeatureMap, read_tensor_file

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineParams:
    """Pseudo-labeling knobs.

    ``eps`` and ``min_samples`` drive the density clustering,
    ``merge_threshold`` cuts the agglomerative dendrogram, ``max_regions``
    caps boxes kept per cluster, and ``gt_overlap_max`` drops candidates whose
    IoU with any ground truth exceeds it. Distance parameters presume
    unnormalized backbone features.
    """

    eps: float = 7.0
    min_samples: int = 35
    merge_threshold: float = 245.0
    max_regions: int = 3
    gt_overlap_max: float = 0.3
    nms_threshold: float = 0.5
    kernel_size: int = 3
    opening_iterations: int = 1
    connectivity: int = 8

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.min_samples < 1:
            raise ValueError(f"min_samples must be >= 1, got {self.min_samples}")
        if self.merge_threshold <= 0:
            raise ValueError(f"merge_threshold must be > 0, got {self.merge_threshold}")
        if self.max_regions < 1:
            raise ValueError(f"max_regions must be >= 1, got {self.max_regions}")
        if not 0.0 < self.gt_overlap_max < 1.0:
            raise ValueError(f"gt_overlap_max must be in (0, 1), got {self.gt_overlap_max}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.opening_iterations < 0:
            raise ValueError(f"opening_iterations must be >= 0, got {self.opening_iterations}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")

    @classmethod
    def from_doc(cls, doc: Mapping) -> "PipelineParams":
        return cls(**{k: doc[k] for k in doc})

    def to_doc(self) -> dict:
        return {
            "eps": self.eps,
            "min_samples": self.min_samples,
            "merge_threshold": self.merge_threshold,
            "max_regions": self.max_regions,
            "gt_overlap_max": self.gt_overlap_max,
            "nms_threshold": self.nms_threshold,
            "kernel_size": self.kernel_size,
            "opening_iterations": self.opening_iterations,
            "connectivity": self.connectivity,
        }


def load_params(path: str | Path) -> PipelineParams:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return PipelineParams.from_doc(doc)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad pipeline params ({exc})") from None


@dataclass(frozen=True)
class ClusterMap:
    """H x W grid of cluster labels; -1 marks background/discarded pixels."""

    labels: np.ndarray
    cluster_count: int

    def __post_init__(self) -> None:
        if self.labels.ndim != 2:
            raise ValueError("cluster labels must be a 2-d grid")
        if self.cluster_count < 0:
            raise ValueError("cluster_count must be >= 0")
        if self.labels.size and self.labels.max() >= self.cluster_count:
            raise ValueError("label exceeds cluster_count")
        if self.labels.size and self.labels.min() < -1:
            raise ValueError("labels must be >= -1")

    @property
    def foreground(self) -> np.ndarray:
        return self.labels >= 0


@dataclass(frozen=True)
class ClusterStats:
    mean_activation: float
    pixel_count: int


@dataclass(frozen=True)
class PseudoLabel:
    """A generated unknown-object box with its provenance."""

    box: BoundingBox
    source_cluster: int
    mean_activation: float


def _neighbor_lists(points: np.ndarray, eps: float, chunk: int = 512) -> list[np.ndarray]:
    """Indices within Euclidean distance eps (inclusive) of each point, exact."""
    neighbors: list[np.ndarray] = []
    for start in range(0, len(points), chunk):
        dists = cdist(points[start:start + chunk], points)
        for row in dists:
            neighbors.append(np.nonzero(row <= eps)[0])
    return neighbors


def dbscan_cluster(feature_map: FeatureMap, eps: float, min_samples: int) -> ClusterMap:
    """Density-based clustering of the H*W patch feature vectors.

    Core points have at least ``min_samples`` neighbors (self included) within
    ``eps``. Clusters are grown breadth-first and numbered in row-major
    discovery order; unreachable points are noise (-1).
    """
    h, w = feature_map.height, feature_map.width
    points = feature_map.values.reshape(h * w, feature_map.dim).astype(np.float64)
    neighbors = _neighbor_lists(points, eps)
    core = np.array([len(nb) >= min_samples for nb in neighbors])

    labels = np.full(h * w, -1, dtype=np.int32)
    cluster = 0
    for i in range(h * w):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in neighbors[p]:
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return ClusterMap(labels=labels.reshape(h, w), cluster_count=cluster)


def _compact(labels: np.ndarray) -> ClusterMap:
    """Renumber surviving cluster ids to 0..m-1, preserving ascending order."""
    old = np.unique(labels[labels >= 0])
    mapping = {int(o): i for i, o in enumerate(old)}
    out = np.full(labels.shape, -1, dtype=np.int32)
    for o, n in mapping.items():
        out[labels == o] = n
    return ClusterMap(labels=out, cluster_count=len(old))


def remove_background(clusters: ClusterMap) -> ClusterMap:
    """Discard the largest cluster (ties: lowest id) and compact the rest."""
    if clusters.cluster_count == 0:
        log.warning("no clusters to remove background from; foreground is empty")
        return clusters
    sizes = np.bincount(clusters.labels[clusters.labels >= 0], minlength=clusters.cluster_count)
    biggest = int(np.argmax(sizes))  # argmax returns the lowest index on ties
    labels = clusters.labels.copy()
    labels[labels == biggest] = -1
    return _compact(labels)


def agglomerative_cluster(
    feature_map: FeatureMap, foreground_mask: np.ndarray, merge_threshold: float
) -> ClusterMap:
    """Bottom-up Ward-linkage clustering of the foreground feature vectors.

    Merging stops once the smallest pairwise linkage distance reaches
    ``merge_threshold``; the surviving clusters are numbered by their first
    pixel in row-major order. Naive O(n^3) merge loop; foreground grids are
    small enough that exactness is worth it.
    """
    ys, xs = np.nonzero(foreground_mask)
    n = len(ys)
    if n == 0:
        raise ValueError("foreground is empty")
    flat = feature_map.values.reshape(-1, feature_map.dim).astype(np.float64)
    idx = ys * feature_map.width + xs
    points = flat[idx]

    labels_out = np.full((feature_map.height, feature_map.width), -1, dtype=np.int32)
    if n == 1:
        labels_out[ys[0], xs[0]] = 0
        return ClusterMap(labels=labels_out, cluster_count=1)

    # Ward linkage via the Lance-Williams recurrence, starting from plain
    # Euclidean distances between singletons.
    dist = cdist(points, points)
    np.fill_diagonal(dist, np.inf)
    size = np.ones(n)
    members: list[list[int] | None] = [[i] for i in range(n)]
    active = n
    while active > 1:
        flat_idx = int(np.argmin(dist))
        i, j = divmod(flat_idx, n)
        if i > j:
            i, j = j, i
        d_ij = dist[i, j]
        if not d_ij < merge_threshold:
            break
        keep = np.array(
            [k for k in range(n) if members[k] is not None and k != i and k != j], dtype=np.intp
        )
        if len(keep):
            t = size[i] + size[j] + size[keep]
            merged = np.sqrt(
                ((size[i] + size[keep]) * dist[i, keep] ** 2
                 + (size[j] + size[keep]) * dist[j, keep] ** 2
                 - size[keep] * d_ij ** 2) / t
            )
            dist[i, keep] = merged
            dist[keep, i] = merged
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        dist[i, i] = np.inf
        size[i] += size[j]
        members[i].extend(members[j])  # type: ignore[union-attr]
        members[j] = None
        active -= 1

    clusters = [m for m in members if m is not None]
    clusters.sort(key=min)
    for cid, member_rows in enumerate(clusters):
        for r in member_rows:
            labels_out[ys[r], xs[r]] = cid
    return ClusterMap(labels=labels_out, cluster_count=len(clusters))


def _erode(mask: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    padded = np.pad(mask, pad, constant_values=False)
    return sliding_window_view(padded, (k, k)).all(axis=(2, 3))


def _dilate(mask: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    padded = np.pad(mask, pad, constant_values=False)
    return sliding_window_view(padded, (k, k)).any(axis=(2, 3))


def refine_morphology(clusters: ClusterMap, kernel_size: int = 3, iterations: int = 1) -> ClusterMap:
    """Open each cluster mask (erode then dilate with a square kernel) to
    drop sub-kernel specks; emptied clusters are removed and ids compacted."""
    if iterations == 0:
        return clusters
    labels = np.full(clusters.labels.shape, -1, dtype=np.int32)
    for cid in range(clusters.cluster_count):
        mask = clusters.labels == cid
        for _ in range(iterations):
            mask = _erode(mask, kernel_size)
        for _ in range(iterations):
            mask = _dilate(mask, kernel_size)
        labels[mask] = cid  # opening is anti-extensive, so masks stay disjoint
    return _compact(labels)


def normalize_attention(attention: AttentionStack) -> AttentionStack:
    """Divide each head map by its own spatial sum, so every map sums to 1."""
    maps = attention.maps.astype(np.float64)
    out = np.empty_like(maps)
    for h in range(attention.heads):
        total = maps[h].sum()
        if total <= 0.0:
            raise ValueError(f"attention head {h} sums to {total}; cannot normalize")
        out[h] = maps[h] / total
    return AttentionStack(maps=out.astype(np.float32), patch_stride=attention.patch_stride)


def average_attention(attention: AttentionStack) -> np.ndarray:
    """Element-wise mean across heads of a normalized stack."""
    return attention.maps.astype(np.float64).mean(axis=0)


def filter_clusters_by_attention(
    clusters: ClusterMap, avg_attention: np.ndarray
) -> tuple[list[int], dict[int, ClusterStats]]:
    """Keep cluster ids whose mean attention strictly exceeds the image mean.

    With perfectly uniform attention nothing is strictly greater than the
    mean, so the keep set is empty by design.
    """
    if clusters.labels.shape != avg_attention.shape:
        raise ValueError(
            f"cluster grid {clusters.labels.shape} and attention {avg_attention.shape} differ"
        )
    global_mean = float(avg_attention.mean())
    kept: list[int] = []
    stats: dict[int, ClusterStats] = {}
    for cid in range(clusters.cluster_count):
        mask = clusters.labels == cid
        count = int(mask.sum())
        mean_act = float(avg_attention[mask].mean()) if count else float("nan")
        stats[cid] = ClusterStats(mean_activation=mean_act, pixel_count=count)
        if count and mean_act > global_mean:
            kept.append(cid)
    return kept, stats


def _components(mask: np.ndarray, connectivity: int) -> list[list[tuple[int, int]]]:
    if connectivity == 8:
        offsets = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    else:
        offsets = [(-1, 0), (0, -1), (0, 1), (1, 0)]
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    components: list[list[tuple[int, int]]] = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            comp = []
            queue = deque([(r, c)])
            seen[r, c] = True
            while queue:
                cr, cc = queue.popleft()
                comp.append((cr, cc))
                for dr, dc in offsets:
                    nr, nc = cr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            components.append(comp)
    return components


def extract_regions(
    mask: np.ndarray, connectivity: int, max_regions: int, patch_stride: int
) -> list[BoundingBox]:
    """Tight pixel boxes around the largest connected regions of a mask.

    Components are ranked by pixel count (ties by first pixel, row-major) and
    the top ``max_regions`` survive. Patch-cell extents are scaled to pixels
    by ``patch_stride``.
    """
    if patch_stride < 1:
        raise ValueError(f"patch_stride must be >= 1, got {patch_stride}")
    components = _components(mask, connectivity)
    components.sort(key=lambda comp: (-len(comp), comp[0]))
    boxes = []
    for comp in components[:max_regions]:
        rows = [p[0] for p in comp]
        cols = [p[1] for p in comp]
        boxes.append(
            BoundingBox(
                x_min=min(cols) * patch_stride,
                y_min=min(rows) * patch_stride,
                x_max=(max(cols) + 1) * patch_stride,
                y_max=(max(rows) + 1) * patch_stride,
            )
        )
    return boxes


def _clamp_box(box: BoundingBox, image_size: tuple[int, int]) -> BoundingBox | None:
    w, h = image_size
    x0, y0 = max(box.x_min, 0.0), max(box.y_min, 0.0)
    x1, y1 = min(box.x_max, float(w)), min(box.y_max, float(h))
    if x1 <= x0 or y1 <= y0:
        return None
    return BoundingBox(x0, y0, x1, y1)


def generate_pseudo_labels(
    feature_map: FeatureMap,
    attention: AttentionStack,
    ground_truths: Sequence[GroundTruthObject | BoundingBox],
    params: PipelineParams,
    image_size: tuple[int, int] | None = None,
) -> list[PseudoLabel]:
    """Run the full per-image pipeline. The result may legitimately be empty
    (everything overlapped ground truth or nothing stood out) or large (many
    strongly activated clusters)."""
    if (feature_map.height, feature_map.width) != (attention.height, attention.width):
        raise ValueError(
            f"feature grid {feature_map.height}x{feature_map.width} does not match "
            f"attention grid {attention.height}x{attention.width}"
        )
    gt_boxes = [g.box if isinstance(g, GroundTruthObject) else g for g in ground_truths]

    clusters = dbscan_cluster(feature_map, params.eps, params.min_samples)
    clusters = remove_background(clusters)
    if clusters.cluster_count == 0:
        return []
    clusters = agglomerative_cluster(feature_map, clusters.foreground, params.merge_threshold)
    clusters = refine_morphology(clusters, params.kernel_size, params.opening_iterations)
    if clusters.cluster_count == 0:
        return []

    avg = average_attention(normalize_attention(attention))
    kept, stats = filter_clusters_by_attention(clusters, avg)

    stride = feature_map.patch_stride if feature_map.patch_stride >= 1 else 1
    candidates: list[PseudoLabel] = []
    for cid in kept:
        for box in extract_regions(clusters.labels == cid, params.connectivity, params.max_regions, stride):
            if image_size is not None:
                clamped = _clamp_box(box, image_size)
                if clamped is None:
                    continue
                box = clamped
            candidates.append(
                PseudoLabel(box=box, source_cluster=cid, mean_activation=stats[cid].mean_activation)
            )

    # Candidate confidence for NMS is the source cluster's mean activation.
    keep_idx = nms([c.box for c in candidates], [c.mean_activation for c in candidates], params.nms_threshold)
    survivors = [candidates[i] for i in keep_idx]
    return [
        c
        for c in survivors
        if all(iou(c.box, gb) <= params.gt_overlap_max for gb in gt_boxes)
    ]


@dataclass
class PseudoLabelRun:
    """Summary of a dataset-level pseudo-labeling pass."""

    output_path: str
    per_image: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    @property
    def total_labels(self) -> int:
        return sum(self.per_image.values())


def _image_task(args) -> tuple:
    image_id, feat_path, attn_path, gt_boxes, image_size, params = args
    feat = read_tensor_file(feat_path)
    attn = read_tensor_file(attn_path)
    if not isinstance(feat, FeatureMap):
        raise ParseError(f"{feat_path}: expected a feature map")
    if not isinstance(attn, AttentionStack):
        raise ParseError(f"{attn_path}: expected an attention stack")
    boxes = [BoundingBox(*b) for b in gt_boxes]
    labels = generate_pseudo_labels(feat, attn, boxes, params, image_size)
    return image_id, labels


def pseudolabel_dataset(
    tensor_dir: str | Path,
    dataset: Dataset,
    params: PipelineParams,
    output_path: str | Path,
    workers: int = 1,
    unknown_category_id: int | None = None,
) -> PseudoLabelRun:
    """Pseudo-label every dataset image with tensors ``<image_id>.feat`` and
    ``<image_id>.attn`` under ``tensor_dir``, writing a COCO-style annotation
    file of unknown-class objects. Images missing either tensor are skipped
    with a report entry. Output is byte-identical across runs and worker
    counts."""
    tensor_dir = Path(tensor_dir)
    if unknown_category_id is None:
        existing = set(dataset.category_names) | {g.class_id for g in dataset.ground_truths}
        unknown_category_id = (max(existing) if existing else 0) + 1

    gts_by_image = dataset.ground_truths_by_image()
    images = sorted(dataset.images, key=lambda img: (isinstance(img.id, str), img.id))
    run = PseudoLabelRun(output_path=str(output_path))

    tasks = []
    for img in images:
        feat_path = tensor_dir / f"{img.id}.feat"
        attn_path = tensor_dir / f"{img.id}.attn"
        if not feat_path.exists() or not attn_path.exists():
            missing = feat_path.name if not feat_path.exists() else attn_path.name
            run.skipped.append((img.id, f"missing tensor file {missing}"))
            continue
        size = (img.width, img.height) if img.width and img.height else None
        gt_boxes = tuple(
            (g.box.x_min, g.box.y_min, g.box.x_max, g.box.y_max) for g in gts_by_image.get(img.id, [])
        )
        tasks.append((img.id, str(feat_path), str(attn_path), gt_boxes, size, params))

    if workers > 1 and len(tasks) > 1:
        with get_context("fork").Pool(workers) as pool:
            results = pool.map(_image_task, tasks)
    else:
        results = [_image_task(t) for t in tasks]

    annotations = []
    ann_id = 1
    for image_id, labels in results:
        run.per_image[image_id] = len(labels)
        for lab in labels:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": unknown_category_id,
                    "bbox": lab.box.to_xywh(),
                    "area": lab.box.area,
                    "iscrowd": 0,
                    "source_cluster": lab.source_cluster,
                    "mean_activation": lab.mean_activation,
                }
            )
            ann_id += 1

    doc = {
        "images": [
            {"id": img.id, "width": img.width, "height": img.height} for img in images
        ],
        "annotations": annotations,
        "categories": [{"id": unknown_category_id, "name": "unknown"}],
    }
    Path(output_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return run
