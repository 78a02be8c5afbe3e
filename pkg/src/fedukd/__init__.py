"""Federated semantic segmentation with on-client knowledge distillation.

The package simulates a federation in a single process: clients distill a
large frozen teacher into a compact student on their local shards, and the
server aggregates only the student weights.
"""

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig
from .data import (
    IGNORE_INDEX,
    CorpusManifest,
    LegendMap,
    SamplePlan,
    SegmentationSample,
    ShapeSpec,
    decode_mask,
    encode_mask,
    generate_synthetic_corpus,
    load_corpus,
    plan_synthetic_corpus,
    rasterize_mask,
    render_sample,
    synthetic_legend,
    write_corpus,
)
from .federation import (
    ClientFailure,
    ClientState,
    FederationConfig,
    GlobalState,
    evaluate_mean_iou,
    evaluate_pixel_accuracy,
    fedavg,
    run_centralized,
    run_federation,
    ukd_learning,
)
from .losses import (
    DistillationConfig,
    combined_loss,
    criterion_loss,
    pixelwise_distillation_loss,
)
from .metrics import (
    CompressionReport,
    MetricsCsvWriter,
    RoundRecord,
    compression_report,
    emit_report,
    mean_iou,
    parse_metrics_csv,
    pixel_accuracy,
    write_metrics_csv,
)
from .models import (
    ModelSpec,
    WeightSet,
    build_student,
    build_teacher,
    count_parameters,
    default_student_spec,
    default_teacher_spec,
    forward,
    initialize_weights,
    load_weights,
    save_weights,
    serialized_size,
    weight_set_from_bytes,
    weight_set_to_bytes,
)
from .partitioning import (
    ClientConstraint,
    PartitionMode,
    PartitionResult,
    PartitionSpec,
    apportion_counts,
    classes_present,
    partition_dataset,
    partition_label_skew,
    partition_quantity_skew,
)

__all__ = [
    "__version__",
    "ConfigError",
    "ExperimentConfig",
    "IGNORE_INDEX",
    "CorpusManifest",
    "LegendMap",
    "SamplePlan",
    "SegmentationSample",
    "ShapeSpec",
    "decode_mask",
    "encode_mask",
    "generate_synthetic_corpus",
    "load_corpus",
    "plan_synthetic_corpus",
    "rasterize_mask",
    "render_sample",
    "synthetic_legend",
    "write_corpus",
    "ClientFailure",
    "ClientState",
    "FederationConfig",
    "GlobalState",
    "evaluate_mean_iou",
    "evaluate_pixel_accuracy",
    "fedavg",
    "run_centralized",
    "run_federation",
    "ukd_learning",
    "DistillationConfig",
    "combined_loss",
    "criterion_loss",
    "pixelwise_distillation_loss",
    "CompressionReport",
    "MetricsCsvWriter",
    "RoundRecord",
    "compression_report",
    "emit_report",
    "mean_iou",
    "parse_metrics_csv",
    "pixel_accuracy",
    "write_metrics_csv",
    "ModelSpec",
    "WeightSet",
    "build_student",
    "build_teacher",
    "count_parameters",
    "default_student_spec",
    "default_teacher_spec",
    "forward",
    "initialize_weights",
    "load_weights",
    "save_weights",
    "serialized_size",
    "weight_set_from_bytes",
    "weight_set_to_bytes",
    "ClientConstraint",
    "PartitionMode",
    "PartitionResult",
    "PartitionSpec",
    "apportion_counts",
    "classes_present",
    "partition_dataset",
    "partition_label_skew",
    "partition_quantity_skew",
]
