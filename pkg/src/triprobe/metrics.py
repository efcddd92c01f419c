"""Average precision over ranked class scores, per component family.

AP is the step-wise area under the precision-recall curve of the
descending-score ranking (no interpolation); ties are broken by the
original example index via a stable sort.  A class with no positive
labels has undefined AP and is excluded from means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .triplets import TripletTable, component_logits, project_labels


def average_precision(scores, labels) -> float | None:
    """AP of one class column; None when the column has no positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"average_precision: shapes {scores.shape} vs {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("average_precision: labels must be binary")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order].astype(bool)
    hits = np.cumsum(ranked)
    ranks = np.arange(1, scores.size + 1)
    precision_at_pos = hits[ranked] / ranks[ranked]
    return float(precision_at_pos.sum() / n_pos)


@dataclass
class ComponentAPReport:
    component: str
    per_class: np.ndarray  # NaN where undefined or absent
    mean: float  # over defined classes with positives; NaN if none
    n_classes: int
    n_scored: int  # classes entering the mean
    n_absent: int  # classes with no triplet preimage


def component_ap(scores: np.ndarray, labels: np.ndarray, table: TripletTable,
                 d: str) -> ComponentAPReport:
    """Project triplet scores/labels to component d and compute per-class AP.

    Scores project by per-class max over the preimage, labels by OR.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError("component_ap: scores and labels must both be (N, n_triplets)")
    proj_scores, defined = component_logits(scores, table, d)
    proj_labels = project_labels(labels.astype(np.int64), table, d)
    n_classes = proj_scores.shape[1]
    per_class = np.full(n_classes, np.nan)
    for k in range(n_classes):
        if not defined[k]:
            continue
        ap = average_precision(proj_scores[:, k], proj_labels[:, k])
        if ap is not None:
            per_class[k] = ap
    scored = ~np.isnan(per_class)
    mean = float(per_class[scored].mean()) if scored.any() else math.nan
    return ComponentAPReport(
        component=d,
        per_class=per_class,
        mean=mean,
        n_classes=n_classes,
        n_scored=int(scored.sum()),
        n_absent=int((~defined).sum()),
    )


def mean_ap_ivt(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AP over triplet classes with positives; no projection involved."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    aps = [average_precision(scores[:, k], labels[:, k]) for k in range(scores.shape[1])]
    vals = [a for a in aps if a is not None]
    return float(np.mean(vals)) if vals else math.nan


def crossval_summary(per_fold: dict) -> dict:
    """Aggregate per-fold metric values into mean and sample std (ddof=1).

    per_fold maps metric name -> sequence of fold values; needs >= 2 folds.
    """
    out = {}
    for name, values in per_fold.items():
        vals = np.asarray(list(values), dtype=np.float64)
        if vals.size < 2:
            raise ValueError(f"crossval_summary: metric {name!r} needs at least 2 folds")
        out[name] = (float(vals.mean()), float(vals.std(ddof=1)))
    return out


def format_mean_std(mean: float, std: float, scale: float = 100.0) -> str:
    """Render a summary cell like '21.2 +- 1.2' (values scaled to percent)."""
    return f"{mean * scale:.1f} +- {std * scale:.1f}"
