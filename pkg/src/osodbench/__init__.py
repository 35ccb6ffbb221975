"""Open-set object detection benchmarking toolkit.

Library and CLI for evaluating detectors that must localize known classes and
flag novel objects as unknown: the metric suite (known mAP, unknown AP,
class-agnostic AP, super-class AP, U-Recall, A-OSE, wilderness impact),
benchmark split construction over hierarchical taxonomies, training-scenario
validation, and an unknown-object pseudo-labeling pipeline over exported ViT
feature/attention tensors.
"""

from .data_model import (
    BoundingBox,
    ClassPartition,
    Dataset,
    Detection,
    GroundTruthObject,
    ImageRecord,
    Taxonomy,
    build_taxonomy,
    parse_annotations,
    parse_detections,
    parse_taxonomy,
)
from .errors import (
    ContractViolationError,
    OsodBenchError,
    OstfDataError,
    OstfFormatError,
    OstfTruncationError,
    ParseError,
    PreconditionError,
    TaxonomyError,
    UndefinedMetricError,
)
from .matching import MatchResult, greedy_match, iou, nms
from .metrics import (
    EvalReport,
    MetricConfig,
    PRCurve,
    SuperClassCounts,
    a_ose,
    ap_all,
    ap_superclass,
    ap_unknown,
    average_precision,
    evaluate,
    map_known,
    u_recall,
    wilderness_impact,
)
from .ostf import AttentionStack, FeatureMap, read_tensor_file, write_tensor_file
from .pseudolabel import (
    ClusterMap,
    ClusterStats,
    PipelineParams,
    PseudoLabel,
    agglomerative_cluster,
    average_attention,
    dbscan_cluster,
    extract_regions,
    filter_clusters_by_attention,
    generate_pseudo_labels,
    normalize_attention,
    pseudolabel_dataset,
    refine_morphology,
    remove_background,
)
from .splits import (
    ScenarioReport,
    SplitSet,
    SplitStatistics,
    partition_classes,
    segment_test_splits,
    select_road_images,
    split_statistics,
    validate_scenario,
)

__version__ = "0.1.0"
