"""Learn object-detection anchor shapes from bounding-box statistics.

Anchors live in log width/height space and are fitted to a dataset of
box shapes by stochastic gradient descent, with an optional surrogate
regression head standing in for a detector. A classic IoU k-means
clusterer is included both as an initializer and as a baseline.
"""

from __future__ import annotations

from .assign import (
    Assignment,
    WarmupSchedule,
    cluster_weight_at,
    hard_assign_threshold,
    hard_assign_yolo,
    soft_assign,
    temperature_at,
    utilization_counts,
)
from .cluster import (
    KMeansResult,
    init_identical,
    init_kmeans,
    init_uniform,
    kmeans_iou,
)
from .geometry import (
    METRICS,
    AnchorSet,
    Box,
    BoxShape,
    LogShape,
    decode_log,
    encode_log,
    iou_aligned,
    iou_aligned_matrix,
    iou_boxes,
    shape_dist,
    shape_dist_matrix,
)
from .ingest import (
    AnnotatedBox,
    CanonicalDataset,
    CanonicalRecord,
    ParseError,
    normalize_to_canvas,
    parse_coco,
    parse_csv,
    parse_voc,
    read_canonical,
    write_canonical,
)
from .lossgrad import (
    BN_EPS,
    BNState,
    DeltaWH,
    HeadGrads,
    HeadParams,
    bn_no_shift,
    cluster_term,
    deltas_from_array,
    grad_anchors,
    grad_head,
    head_forward,
    head_outputs,
    loss_wh,
    loss_xy,
    make_features,
    total_loss,
    zero_deltas,
)
from .report import (
    AnchorReport,
    anchors_line,
    avg_best_iou,
    build_report,
    match_anchor_sets,
    match_pairing,
    read_anchors_json,
    recall_at,
    render_text,
    report_from_json,
    report_to_json,
    write_anchors_json,
)
from .trainer import (
    EpochUtilization,
    HeadConfig,
    NonFiniteLossError,
    TrainConfig,
    TrainResult,
    Trajectory,
    TrajectoryRow,
    lr_at,
    run_training,
    sgd_step,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorReport",
    "AnchorSet",
    "AnnotatedBox",
    "Assignment",
    "BNState",
    "BN_EPS",
    "Box",
    "BoxShape",
    "CanonicalDataset",
    "CanonicalRecord",
    "DeltaWH",
    "EpochUtilization",
    "HeadConfig",
    "HeadGrads",
    "HeadParams",
    "KMeansResult",
    "LogShape",
    "METRICS",
    "NonFiniteLossError",
    "ParseError",
    "TrainConfig",
    "TrainResult",
    "Trajectory",
    "TrajectoryRow",
    "WarmupSchedule",
    "anchors_line",
    "avg_best_iou",
    "bn_no_shift",
    "build_report",
    "cluster_term",
    "cluster_weight_at",
    "decode_log",
    "deltas_from_array",
    "encode_log",
    "grad_anchors",
    "grad_head",
    "hard_assign_threshold",
    "hard_assign_yolo",
    "head_forward",
    "head_outputs",
    "init_identical",
    "init_kmeans",
    "init_uniform",
    "iou_aligned",
    "iou_aligned_matrix",
    "iou_boxes",
    "kmeans_iou",
    "loss_wh",
    "loss_xy",
    "lr_at",
    "make_features",
    "match_anchor_sets",
    "match_pairing",
    "normalize_to_canvas",
    "parse_coco",
    "parse_csv",
    "parse_voc",
    "read_anchors_json",
    "read_canonical",
    "recall_at",
    "render_text",
    "report_from_json",
    "report_to_json",
    "run_training",
    "sgd_step",
    "shape_dist",
    "shape_dist_matrix",
    "soft_assign",
    "temperature_at",
    "total_loss",
    "utilization_counts",
    "write_anchors_json",
    "write_canonical",
    "zero_deltas",
]
