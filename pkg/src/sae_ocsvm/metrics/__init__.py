"""Voxel-wise evaluation metrics, statistical tests and report tables."""
from .curves import (
    LesionSet,
    ScoredVoxels,
    best_dice,
    connected_components,
    dice_at,
    pr_auc,
    pro_auc,
    pro_curve,
    roc_auc,
    roc_curve,
)
from .report import METRICS, RAW_METRICS, MetricReport, aggregate_report, evaluate_map, to_text, to_tsv
from .stats import dunn_test, kruskal_wallis

__all__ = [
    "LesionSet",
    "METRICS",
    "MetricReport",
    "RAW_METRICS",
    "ScoredVoxels",
    "aggregate_report",
    "best_dice",
    "connected_components",
    "dice_at",
    "dunn_test",
    "evaluate_map",
    "kruskal_wallis",
    "pr_auc",
    "pro_auc",
    "pro_curve",
    "roc_auc",
    "roc_curve",
    "to_text",
    "to_tsv",
]
