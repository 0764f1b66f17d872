"""Scoring against classification and detection ground truth."""

from .manifests import (
    MOVING_OBJECT_LABELS,
    ClassificationSample,
    DetectionSample,
    Instance,
    ManifestError,
    detect_manifest_kind,
    load_classification_manifest,
    load_detection_manifest,
    truth_for,
)
from .metrics import (
    DEFAULT_TAU,
    EvalReport,
    EvaluationError,
    Matching,
    classification_recall,
    detection_metrics,
    f1_score,
    match_detections,
)
from .reports import (
    DEFAULT_IMAGE_TOKENS,
    CostRow,
    DeltaRow,
    ReportMismatchError,
    category_table_csv,
    compare_reports,
    cost_performance_table,
    cost_plot_csv,
    cost_table_csv,
    deltas_to_csv,
    detection_table_csv,
    format_category_table,
    format_cost_table,
    format_detection_table,
    load_fixture_reports,
    load_report,
    save_report,
)
