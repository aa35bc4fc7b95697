"""Paired t-test between two methods' per-dataset scores."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special


@dataclass
class PairedTTestResult:
    mean_diff: float
    t_statistic: float
    df: int
    p_value: float
    stars: str


def significance_stars(p: float) -> str:
    """``***`` for p < 0.001, ``**`` for p < 0.01, ``*`` for p < 0.05, else ``ns``."""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"


def student_t_two_sided_p(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t via the regularized incomplete beta."""
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_ttest(a, b) -> PairedTTestResult:
    """Test whether mean(a - b) differs from zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length 1-D sequences, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(np.sqrt(((d - mean) ** 2).sum() / (n - 1)))
    if sd == 0.0:
        raise ValueError("paired differences have zero variance; the t statistic is undefined")
    t = mean / (sd / math.sqrt(n))
    p = student_t_two_sided_p(t, n - 1)
    return PairedTTestResult(mean, t, n - 1, p, significance_stars(p))
