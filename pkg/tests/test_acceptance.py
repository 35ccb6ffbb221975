"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
Oracle comparisons are exact (bit-identical floats): the implementation and
the brute-force oracles share IEEE arithmetic and the documented tie rules,
so any drift in matching or curve logic shows up as inequality.
"""
import json
import os
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest
from sklearn.cluster import DBSCAN, AgglomerativeClustering

from osodbench import (
    BoundingBox,
    ClassPartition,
    Dataset,
    Detection,
    EvalReport,
    GroundTruthObject,
    ImageRecord,
    MetricConfig,
    PipelineParams,
    Taxonomy,
    UndefinedMetricError,
    a_ose,
    agglomerative_cluster,
    ap_all,
    ap_superclass,
    ap_unknown,
    average_precision,
    dbscan_cluster,
    generate_pseudo_labels,
    map_known,
    u_recall,
    wilderness_impact,
)
from osodbench.cli import main
from osodbench.matching import iou
from conftest import (
    BLOB_PARAMS,
    BLOB_PIXEL_BOX,
    blob_attention,
    blob_feature_map,
    det,
    gt,
    write_annotations,
    write_blob_tensors,
    write_detections,
    write_partition_file,
    write_taxonomy_file,
)
import oracles


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {name}: FAIL")
        raise
    print(f"\nACCEPTANCE {name}: PASS")


# Shared random-instance universe: three super-classes, knowns 1..3,
# unknowns 11..13, reserved unknown label 99.
KNOWN = (1, 2, 3)
UNKNOWN_CLASSES = (11, 12, 13)
UNK = 99
SUPERS = {1: 0, 2: 0, 11: 0, 3: 1, 12: 1, 13: 2}
PARTITION = ClassPartition.create(known=KNOWN, unknown=UNKNOWN_CLASSES, unknown_label=UNK)
TAXONOMY = Taxonomy(
    class_to_superclass=SUPERS,
    superclass_names=("vehicle", "street sign", "animal"),
    class_names={1: "car", 2: "bus", 3: "stop sign", 11: "helicopter", 12: "billboard", 13: "dog"},
)


def _rand_box(rng):
    x = rng.uniform(0, 80)
    y = rng.uniform(0, 80)
    return (x, y, x + rng.uniform(2, 40), y + rng.uniform(2, 40))


def _random_instance(rng, pure_ood):
    n_gt = rng.randint(0, 6)
    n_det = rng.randint(0, 6)
    gt_classes = UNKNOWN_CLASSES if pure_ood else KNOWN + UNKNOWN_CLASSES
    det_classes = KNOWN + (UNK,)
    raw_gts = [
        {"image": rng.randint(1, 2), "cls": rng.choice(gt_classes), "box": _rand_box(rng)}
        for _ in range(n_gt)
    ]
    raw_dets = [
        {
            "image": rng.randint(1, 2),
            "cls": rng.choice(det_classes),
            "score": rng.random(),
            "box": _rand_box(rng),
        }
        for _ in range(n_det)
    ]
    dets = [det(d["image"], d["cls"], d["score"], d["box"]) for d in raw_dets]
    gts = [gt(g["image"], g["cls"], g["box"]) for g in raw_gts]
    return raw_dets, raw_gts, dets, gts


def _none_on_undefined(fn):
    try:
        return fn()
    except UndefinedMetricError:
        return None


def test_metric_oracle_equivalence():
    with criterion("metric oracle equivalence (500 instances)"):
        start = time.monotonic()
        rng = random.Random(20240501)
        cfg = MetricConfig()
        thr, tau = cfg.iou_threshold, cfg.score_threshold
        for k in range(500):
            pure_ood = k % 2 == 1
            raw_dets, raw_gts, dets, gts = _random_instance(rng, pure_ood)

            got = _none_on_undefined(lambda: map_known(dets, gts, PARTITION, cfg)[0])
            assert got == oracles.oracle_map_known(raw_dets, raw_gts, KNOWN, thr)

            assert ap_unknown(dets, gts, PARTITION, cfg)[0] == oracles.oracle_ap_unknown(
                raw_dets, raw_gts, set(UNKNOWN_CLASSES), UNK, thr
            )
            assert ap_all(dets, gts, cfg)[0] == oracles.oracle_ap_all(raw_dets, raw_gts, thr)

            if pure_ood:
                assert ap_superclass(dets, gts, TAXONOMY, PARTITION, cfg)[0] == (
                    oracles.oracle_ap_superclass(raw_dets, raw_gts, SUPERS, UNK, thr)
                )

            got = _none_on_undefined(lambda: u_recall(dets, gts, PARTITION, cfg))
            assert got == oracles.oracle_u_recall(
                raw_dets, raw_gts, set(UNKNOWN_CLASSES), UNK, thr, tau
            )
            assert a_ose(dets, gts, PARTITION, cfg) == oracles.oracle_a_ose(
                raw_dets, raw_gts, set(KNOWN), set(UNKNOWN_CLASSES), thr, tau
            )
            got = _none_on_undefined(lambda: wilderness_impact(dets, gts, PARTITION, cfg))
            assert got == oracles.oracle_wi(
                raw_dets, raw_gts, set(KNOWN), set(UNKNOWN_CLASSES), thr, tau
            )
        elapsed = time.monotonic() - start
        assert elapsed < 10.0, f"oracle equivalence took {elapsed:.1f}s"


def test_ap_engine_golden_cases():
    with criterion("AP engine golden cases"):
        assert average_precision([(0.9, True), (0.8, True)], 2) == 1.0
        assert average_precision([(0.9, True), (0.8, False)], 2) == 0.5
        assert average_precision([(0.9, False), (0.8, True)], 1) == 0.5
        rng = random.Random(77)
        for _ in range(400):
            n = rng.randint(0, 10)
            num_gt = rng.randint(0, 10)
            tp_count = rng.randint(0, min(n, num_gt))
            flags = [True] * tp_count + [False] * (n - tp_count)
            rng.shuffle(flags)
            scored = [(rng.random(), f) for f in flags]
            assert average_precision(scored, num_gt) == oracles.exhaustive_ap(scored, num_gt)


def test_superclass_semantics():
    with criterion("super-class AP semantics"):
        cfg = MetricConfig()
        # unknown helicopter detected as airplane-like known class of the same
        # super-class: credited as a super-class true positive
        gts = [gt(1, 11, (0, 0, 10, 10))]
        dets = [det(1, 1, 0.9, (0, 0.5, 10, 10.5))]
        value, _, counts = ap_superclass(dets, gts, TAXONOMY, PARTITION, cfg)
        assert (counts.tp, counts.fp, counts.fn) == (1, 0, 0)
        assert value == 1.0

        # wrong super-class: detection is FP and the object stays FN
        gts = [gt(1, 12, (0, 0, 10, 10))]
        value, _, counts = ap_superclass(dets, gts, TAXONOMY, PARTITION, cfg)
        assert (counts.tp, counts.fp, counts.fn) == (0, 1, 1)
        assert value == 0.0

        # perfectly localized but known-labeled: unknown AP is exactly zero
        gts = [gt(1, 11, (0, 0, 10, 10)), gt(1, 12, (50, 50, 60, 60))]
        dets = [det(1, 1, 0.9, (0, 0, 10, 10)), det(1, 3, 0.8, (50, 50, 60, 60))]
        assert ap_unknown(dets, gts, PARTITION, cfg)[0] == 0.0


def test_rank_invariance_under_score_scaling():
    with criterion("rank invariance under score scaling"):
        rng = random.Random(4242)
        cfg = MetricConfig()
        half_cfg = MetricConfig(score_threshold=cfg.score_threshold * 0.5)
        for k in range(100):
            pure_ood = k % 2 == 1
            _, _, dets, gts = _random_instance(rng, pure_ood)
            scaled = [
                Detection(d.image_id, d.class_id, d.score * 0.5, d.box) for d in dets
            ]
            assert _none_on_undefined(lambda: map_known(dets, gts, PARTITION, cfg)[0]) == (
                _none_on_undefined(lambda: map_known(scaled, gts, PARTITION, cfg)[0])
            )
            assert ap_unknown(dets, gts, PARTITION, cfg)[0] == ap_unknown(scaled, gts, PARTITION, cfg)[0]
            assert ap_all(dets, gts, cfg)[0] == ap_all(scaled, gts, cfg)[0]
            if pure_ood:
                assert ap_superclass(dets, gts, TAXONOMY, PARTITION, cfg)[0] == (
                    ap_superclass(scaled, gts, TAXONOMY, PARTITION, cfg)[0]
                )
            assert _none_on_undefined(lambda: u_recall(dets, gts, PARTITION, cfg)) == (
                _none_on_undefined(lambda: u_recall(scaled, gts, PARTITION, half_cfg))
            )
            assert a_ose(dets, gts, PARTITION, cfg) == a_ose(scaled, gts, PARTITION, half_cfg)
            assert _none_on_undefined(lambda: wilderness_impact(dets, gts, PARTITION, cfg)) == (
                _none_on_undefined(lambda: wilderness_impact(scaled, gts, PARTITION, half_cfg))
            )


def test_split_builder_and_scenario_validator(tmp_path):
    with criterion("split builder and scenario validator"):
        # three super-classes: [100, 80, 70, 50], [100, 59], [40, 30]
        entries = [(i, f"class{i}", "super0") for i in (1, 2, 3, 4)]
        entries += [(i, f"class{i}", "super1") for i in (5, 6)]
        entries += [(i, f"class{i}", "super2") for i in (7, 8)]
        tax = write_taxonomy_file(tmp_path / "tax.json", entries)
        counts = {1: 100, 2: 80, 3: 70, 4: 50, 5: 100, 6: 59, 7: 40, 8: 30}
        images, annotations = [], []
        img_id = 0
        for cls, count in counts.items():
            for _ in range(count):
                images.append((img_id, 100, 100))
                annotations.append((img_id, cls, (0, 0, 10, 10)))
                img_id += 1
        ann = write_annotations(tmp_path / "ann.json", images, annotations)
        recipe = tmp_path / "recipe.json"
        recipe.write_text(
            json.dumps(
                {
                    "triggers": ["super0", "super1", "super2"],
                    "exclusions": [],
                    "frac": 0.5,
                    "min_instances": 60,
                }
            )
        )
        rc = main(
            [
                "build-splits",
                "--annotations", str(ann),
                "--taxonomy", str(tax),
                "--recipe", str(recipe),
                "--out", str(tmp_path / "out"),
            ]
        )
        assert rc == 0
        partition = json.loads((tmp_path / "out" / "partition.json").read_text())
        assert partition["known"] == [1, 2, 5]
        assert partition["unknown"] == [3, 4, 6, 7, 8]

        # unseen validator: a single planted unknown annotation means exit 3
        train = write_annotations(
            tmp_path / "train.json",
            [(1, 100, 100), (2, 100, 100)],
            [(1, 1, (0, 0, 10, 10)), (2, 5, (0, 0, 10, 10))],
        )
        part_file = tmp_path / "out" / "partition.json"
        assert main(
            ["validate-scenario", "--annotations", str(train), "--partition", str(part_file), "--claim", "unseen"]
        ) == 0
        planted = write_annotations(
            tmp_path / "train_bad.json",
            [(1, 100, 100)],
            [(1, 1, (0, 0, 10, 10)), (1, 4, (20, 20, 10, 10))],
        )
        assert main(
            ["validate-scenario", "--annotations", str(planted), "--partition", str(part_file), "--claim", "unseen"]
        ) == 3


def _partitions_equal(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if not np.array_equal(a == -1, b == -1):
        return False
    mapping = {}
    for la, lb in zip(a, b):
        if la == -1:
            continue
        if mapping.setdefault(la, lb) != lb:
            return False
    return len(set(mapping.values())) == len(mapping)


def test_pipeline_end_to_end():
    with criterion("pseudo-labeling pipeline end to end"):
        start = time.monotonic()
        params = PipelineParams(**BLOB_PARAMS)

        labels = generate_pseudo_labels(blob_feature_map(), blob_attention(), [], params)
        assert len(labels) == 1
        assert iou(labels[0].box, BoundingBox(*BLOB_PIXEL_BOX)) >= 0.9

        x0, y0, x1, y1 = BLOB_PIXEL_BOX
        overlapping = BoundingBox(x0 + 24, y0, x1 + 24, y1)
        assert iou(overlapping, BoundingBox(*BLOB_PIXEL_BOX)) == 0.4
        assert generate_pseudo_labels(blob_feature_map(), blob_attention(), [overlapping], params) == []

        assert generate_pseudo_labels(blob_feature_map(), blob_attention(uniform=True), [], params) == []

        # stage-level agreement with reference clustering on <= 400 points
        from osodbench import FeatureMap

        for seed in (0, 1):
            rng = np.random.default_rng(seed)
            blobs = [
                rng.normal(0.0, 1.0, size=(size, 4)) + np.asarray(c)
                for size, c in ((134, (0, 0, 0, 0)), (133, (70, 0, 0, 0)), (133, (0, 70, 70, 0)))
            ]
            pts = np.concatenate(blobs)
            fm = FeatureMap(values=pts.astype(np.float32).reshape(20, 20, 4), patch_stride=1)

            mine = dbscan_cluster(fm, eps=6.0, min_samples=8)
            ref = DBSCAN(eps=6.0, min_samples=8, algorithm="brute").fit_predict(pts)
            assert _partitions_equal(mine.labels, ref.reshape(20, 20))

            mine = agglomerative_cluster(fm, np.ones((20, 20), dtype=bool), merge_threshold=120.0)
            ref = AgglomerativeClustering(
                n_clusters=None, distance_threshold=120.0, linkage="ward"
            ).fit_predict(pts)
            assert _partitions_equal(mine.labels, ref.reshape(20, 20))

        elapsed = time.monotonic() - start
        assert elapsed < 30.0, f"pipeline acceptance took {elapsed:.1f}s"


def _run_evaluate(tmp_path, tag, workers):
    ann = write_annotations(
        tmp_path / "ann.json",
        [(1, 200, 200), (2, 200, 200), (3, 200, 200)],
        [
            (1, 1, (0, 0, 10, 10)),
            (2, 11, (0, 0, 10, 10)),
            (3, 1, (0, 0, 10, 10)),
            (3, 12, (50, 50, 10, 10)),
        ],
    )
    dets = write_detections(
        tmp_path / "det.json",
        [
            (1, 1, 0.9, (0, 0, 10, 10)),
            (2, 99, 0.9, (0, 0, 10, 10)),
            (3, 1, 0.9, (0, 0, 10, 10)),
            (3, 99, 0.8, (50, 50, 10, 10)),
        ],
    )
    tax = write_taxonomy_file(
        tmp_path / "tax.json",
        [
            (1, "car", "vehicle"),
            (2, "bus", "vehicle"),
            (3, "stop sign", "street sign"),
            (11, "helicopter", "vehicle"),
            (12, "billboard", "street sign"),
            (13, "dog", "animal"),
        ],
    )
    part = write_partition_file(tmp_path / "part.json", [1, 2, 3], [11, 12, 13])
    out = tmp_path / f"out_{tag}"
    rc = main(
        [
            "evaluate",
            "--annotations", str(ann),
            "--detections", str(dets),
            "--taxonomy", str(tax),
            "--partition", str(part),
            "--out", str(out),
            "--plots",
            "--workers", str(workers),
        ]
    )
    assert rc == 0
    blobs = [(out / "report.json").read_bytes(), (out / "metrics.csv").read_bytes()]
    for svg in sorted((out / "plots").glob("*.svg")):
        blobs.append(svg.read_bytes())
    return blobs


def _run_pseudolabel(tmp_path, tag, workers):
    tensors = tmp_path / "tensors"
    if not tensors.exists():
        write_blob_tensors(tensors, 1)
        write_blob_tensors(tensors, 2)
    ann = write_annotations(
        tmp_path / "plann.json", [(1, 224, 224), (2, 224, 224)], [(2, 1, (70, 56, 56, 56))]
    )
    params = tmp_path / "params.json"
    params.write_text(json.dumps(BLOB_PARAMS))
    out = tmp_path / f"pl_{tag}.json"
    rc = main(
        [
            "pseudolabel",
            "--tensors", str(tensors),
            "--annotations", str(ann),
            "--params", str(params),
            "--out", str(out),
            "--workers", str(workers),
        ]
    )
    assert rc == 0
    return out.read_bytes()


def test_determinism_across_runs_and_workers(tmp_path):
    with criterion("byte-identical outputs across runs and worker counts"):
        eval_outputs = [
            _run_evaluate(tmp_path, f"w{w}_r{r}", w) for w in (1, 4) for r in range(3)
        ]
        assert all(o == eval_outputs[0] for o in eval_outputs[1:])
        pl_outputs = [
            _run_pseudolabel(tmp_path, f"w{w}_r{r}", w) for w in (1, 4) for r in range(3)
        ]
        assert all(o == pl_outputs[0] for o in pl_outputs[1:])


def test_report_golden_round_trip():
    with criterion("report golden-file round trip"):
        report = EvalReport(
            config=MetricConfig().resolved(),
            splits={
                "id": {"map_known": 21.9},
                "ood": {
                    "ap_unknown": 9.0,
                    "ap_all": 56.4,
                    "ap_superclass": 37.9,
                    "u_recall": 84.7,
                },
            },
        )
        text = report.to_json()
        assert EvalReport.from_json(text).to_json() == text
        again = EvalReport.from_json(EvalReport.from_json(text).to_json())
        assert again.to_json() == text


ROAD_DUMP = os.environ.get("OSODBENCH_OPENIMAGES_ROAD")


@pytest.mark.skipif(
    not ROAD_DUMP,
    reason="set OSODBENCH_OPENIMAGES_ROAD to a directory with annotations.json, "
    "taxonomy.json, and recipe.json to check the published dataset statistics",
)
def test_road_benchmark_statistics(tmp_path):
    with criterion("road benchmark statistics on the real dump"):
        root = os.path.abspath(ROAD_DUMP)
        rc = main(
            [
                "build-splits",
                "--annotations", os.path.join(root, "annotations.json"),
                "--taxonomy", os.path.join(root, "taxonomy.json"),
                "--recipe", os.path.join(root, "recipe.json"),
                "--out", str(tmp_path / "road_out"),
            ]
        )
        assert rc == 0
        stats = json.loads((tmp_path / "road_out" / "statistics.json").read_text())
        assert stats["image_count"] == 228153
        assert stats["object_count"] == 1120348
        assert stats["known_class_count"] == 50
        assert stats["unknown_class_count"] == 113
