"""Segmentation metrics, aggregation and paired significance tests."""

from .core import (
    ImageMetrics,
    MetricReport,
    MetricSummary,
    aggregate,
    dice,
    evaluate_pair,
    hausdorff,
    mean_std,
    miou,
    xor_metric,
    xor_ratio,
)
from .stats import PairedTTestResult, paired_ttest, significance_stars

__all__ = [
    "ImageMetrics",
    "MetricReport",
    "MetricSummary",
    "PairedTTestResult",
    "aggregate",
    "dice",
    "evaluate_pair",
    "hausdorff",
    "mean_std",
    "miou",
    "paired_ttest",
    "significance_stars",
    "xor_metric",
    "xor_ratio",
]
