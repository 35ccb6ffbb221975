"""Command-line entry point.

Subcommands: evaluate, build-splits, pseudolabel, validate-scenario. Exit
codes are stable API: 0 success, 1 input error, 2 metric precondition
violation, 3 scenario violation. Every subcommand accepts --dry-run, which
validates inputs without writing anything. Identical inputs and flags produce
byte-identical outputs. Set OSODBENCH_LOG to control log verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import report as report_mod
from .data_model import parse_annotations, parse_detections, parse_taxonomy
from .errors import OsodBenchError, ParseError, PreconditionError, UndefinedMetricError
from .metrics import SPLIT_NAMES, MetricConfig, evaluate, tau_sweep_rows
from .pseudolabel import PipelineParams, load_params, pseudolabel_dataset
from .splits import (
    SplitRecipe,
    class_instance_counts,
    drop_classes,
    load_partition,
    load_recipe,
    load_splits,
    partition_classes,
    resolve_class_names,
    restrict_to_images,
    segment_test_splits,
    select_road_images,
    split_statistics,
    validate_scenario,
    write_partition,
    write_splits,
)

log = logging.getLogger("osodbench")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_PRECONDITION = 2
EXIT_SCENARIO = 3

# Metric availability per split, mirroring the evaluation contract.
_SPLIT_METRICS = {
    "id": {"map_known"},
    "all": {"map_known", "ap_unknown", "ap_all", "u_recall", "a_ose", "wilderness_impact"},
    "ood": {"ap_unknown", "ap_all", "ap_superclass", "u_recall", "a_ose", "wilderness_impact"},
}


def _setup_logging() -> None:
    level = os.environ.get("OSODBENCH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _parse_tau_list(text: str) -> list[float]:
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ParseError(f"--score-thresh must be a comma-separated float list, got {text!r}")
    if not taus:
        raise ParseError("--score-thresh must name at least one threshold")
    return taus


def cmd_evaluate(args: argparse.Namespace) -> int:
    dataset = parse_annotations(args.annotations)
    partition = load_partition(args.partition)
    taxonomy = parse_taxonomy(args.taxonomy) if args.taxonomy else dataset.taxonomy
    detections = parse_detections(args.detections, partition=partition)
    splits = load_splits(args.splits_file) if args.splits_file else segment_test_splits(dataset, partition)

    split_names = tuple(s.strip() for s in args.split.split(",") if s.strip())
    for name in split_names:
        if name not in SPLIT_NAMES:
            raise ParseError(f"unknown split {name!r}; expected any of {', '.join(SPLIT_NAMES)}")

    taus = _parse_tau_list(args.score_thresh)
    config = MetricConfig(
        iou_threshold=args.iou_thresh,
        score_threshold=taus[0],
        strict_iou=args.strict_iou,
        interpolation="11point" if args.eleven_point else "all",
        compute_wi=args.wi,
    )

    if args.metrics:
        requested = {m.strip() for m in args.metrics.split(",") if m.strip()}
        for metric in sorted(requested):
            if not any(metric in _SPLIT_METRICS[s] for s in SPLIT_NAMES):
                raise ParseError(f"unknown metric {metric!r}")
            bad = [s for s in split_names if metric not in _SPLIT_METRICS[s]]
            if bad:
                raise PreconditionError(
                    f"{metric} cannot be computed on split(s) {', '.join(bad)}"
                    + (": it requires the pure-OOD split" if metric == "ap_superclass" else "")
                )
        if "ap_superclass" in requested and taxonomy is None:
            raise PreconditionError("ap_superclass requires a taxonomy")

    if args.dry_run:
        print("dry run: inputs valid")
        return EXIT_OK

    result = evaluate(dataset, detections, taxonomy, partition, splits, config, split_names=split_names)
    if len(taus) > 1:
        result.tau_sweep = tau_sweep_rows(
            dataset, detections, partition, splits, config, taus,
            split_names=[s for s in split_names if s in ("all", "ood")],
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_mod.write_report(result, out / "report.json")
    report_mod.write_csv(result, out / "metrics.csv")
    if args.plots:
        report_mod.write_pr_curve_svgs(result, out / "plots")
    print(f"evaluated splits {', '.join(split_names)}; report written to {out / 'report.json'}")
    for split in sorted(result.splits):
        for metric in sorted(result.splits[split]):
            print(f"  {split:4s} {metric:18s} {result.splits[split][metric]}")
    return EXIT_OK


def cmd_build_splits(args: argparse.Namespace) -> int:
    dataset = parse_annotations(args.annotations)
    taxonomy = parse_taxonomy(args.taxonomy) if args.taxonomy else dataset.taxonomy
    if taxonomy is None:
        raise ParseError("build-splits needs a taxonomy (--taxonomy or annotation categories)")
    recipe = load_recipe(args.recipe) if args.recipe else SplitRecipe()

    selected = select_road_images(dataset, taxonomy, recipe.triggers, recipe.exclusions)
    if not selected:
        raise ParseError("no images selected by the recipe")
    dataset = restrict_to_images(dataset, selected)
    if recipe.part_class_exclusions:
        extra = resolve_class_names(taxonomy, recipe.part_class_exclusions)
        dataset = drop_classes(dataset, extra)
        taxonomy = taxonomy.without_classes(extra)

    counts = class_instance_counts(dataset)
    partition = partition_classes(counts, taxonomy, recipe.frac, recipe.min_instances)
    splits = segment_test_splits(dataset, partition)
    stats = split_statistics(dataset, partition, taxonomy)

    if args.dry_run:
        print("dry run: inputs valid")
        return EXIT_OK

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_partition(partition, out / "partition.json")
    write_splits(splits, out / "splits.json")
    import json

    (out / "statistics.json").write_text(
        json.dumps(stats.to_doc(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"selected {stats.image_count} images, {stats.object_count} objects; "
        f"{stats.known_class_count} known / {stats.unknown_class_count} unknown classes"
    )
    return EXIT_OK


def cmd_pseudolabel(args: argparse.Namespace) -> int:
    tensor_dir = Path(args.tensors)
    if not tensor_dir.is_dir() or not any(tensor_dir.iterdir()):
        raise ParseError(f"tensor directory {tensor_dir} is missing or empty")
    dataset = parse_annotations(args.annotations)
    params = load_params(args.params) if args.params else PipelineParams()

    if args.dry_run:
        print("dry run: inputs valid")
        return EXIT_OK

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    run = pseudolabel_dataset(tensor_dir, dataset, params, out, workers=args.workers)
    for image_id in sorted(run.per_image, key=lambda i: (isinstance(i, str), i)):
        print(f"  image {image_id}: {run.per_image[image_id]} pseudo-labels")
    for image_id, reason in run.skipped:
        print(f"  image {image_id}: skipped ({reason})")
    print(f"wrote {run.total_labels} pseudo-labels to {out}")
    return EXIT_OK


def cmd_validate_scenario(args: argparse.Namespace) -> int:
    dataset = parse_annotations(args.annotations)
    partition = load_partition(args.partition)
    if args.dry_run:
        print("dry run: inputs valid")
        return EXIT_OK
    result = validate_scenario(dataset, partition, args.claim)
    for image_id, class_id in result.violations:
        print(f"violation: image={image_id} class={class_id}")
    if result.note:
        print(f"note: {result.note}")
    if not result.verified:
        print(f"scenario {args.claim!r} NOT verified: {len(result.violations)} violation(s)")
        return EXIT_SCENARIO
    print(f"scenario {args.claim!r} verified")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osodbench",
        description="Open-set object detection benchmarking toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("evaluate", help="compute the metric suite on test splits")
    p_eval.add_argument("--annotations", required=True, help="COCO-style test annotations")
    p_eval.add_argument("--detections", required=True, help="COCO-results-style detections")
    p_eval.add_argument("--partition", required=True, help="known/unknown partition file")
    p_eval.add_argument("--taxonomy", help="taxonomy file (needed for super-class AP)")
    p_eval.add_argument("--splits-file", help="precomputed split file; derived from the partition if omitted")
    p_eval.add_argument("--split", default="id,ood,all", help="comma list of splits to evaluate")
    p_eval.add_argument("--metrics", help="comma list of metrics that must be computable on every selected split")
    p_eval.add_argument("--iou-thresh", type=float, default=0.5)
    p_eval.add_argument("--score-thresh", default="0.05", help="tau, or a comma list to sweep")
    p_eval.add_argument("--strict-iou", action="store_true", help="match on IoU > threshold instead of >=")
    p_eval.add_argument("--eleven-point", action="store_true", help="legacy 11-point AP interpolation")
    p_eval.add_argument("--wi", action="store_true", help="also report wilderness impact")
    p_eval.add_argument("--plots", action="store_true", help="emit SVG PR-curve plots")
    p_eval.add_argument("--out", default="eval_out")
    p_eval.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p_eval.add_argument("--dry-run", action="store_true")
    p_eval.set_defaults(fn=cmd_evaluate)

    p_build = sub.add_parser("build-splits", help="construct partition, splits, and statistics from a dump")
    p_build.add_argument("--annotations", required=True)
    p_build.add_argument("--taxonomy")
    p_build.add_argument("--recipe", help="split recipe document; defaults cover the road benchmark")
    p_build.add_argument("--out", default="splits_out")
    p_build.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p_build.add_argument("--dry-run", action="store_true")
    p_build.set_defaults(fn=cmd_build_splits)

    p_pl = sub.add_parser("pseudolabel", help="generate unknown-object pseudo-labels from exported tensors")
    p_pl.add_argument("--tensors", required=True, help="directory of <image_id>.feat/.attn files")
    p_pl.add_argument("--annotations", required=True, help="annotations used for overlap filtering")
    p_pl.add_argument("--params", help="pipeline parameter document")
    p_pl.add_argument("--out", default="pseudo_labels.json")
    p_pl.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p_pl.add_argument("--dry-run", action="store_true")
    p_pl.set_defaults(fn=cmd_pseudolabel)

    p_val = sub.add_parser("validate-scenario", help="check a claimed training scenario against the labels")
    p_val.add_argument("--annotations", required=True, help="training annotations")
    p_val.add_argument("--partition", required=True)
    p_val.add_argument("--claim", choices=("unseen", "unlabeled"), required=True)
    p_val.add_argument("--dry-run", action="store_true")
    p_val.set_defaults(fn=cmd_validate_scenario)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (PreconditionError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (OsodBenchError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
