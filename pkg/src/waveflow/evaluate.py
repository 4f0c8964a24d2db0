"""Detection metrics and the training-free wavelet-magnitude baseline.

Scores follow the convention "higher means more anomalous".  The AUC is
the rank statistic P(anomaly score > nominal score) + 0.5 P(tie),
computed with midranks; the ROC sweep visits every distinct score as a
threshold, so tied scores across classes show up as diagonal segments
whose trapezoid area matches the rank AUC exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .haar import build_pyramid
from .waveletflow import MIN_SCORING_SIZE

__all__ = [
    "BaselineReport",
    "auc",
    "roc_points",
    "trapezoid_area",
    "pooled_histogram",
    "summarize",
    "wavelet_magnitude_score",
    "metrics_json",
]


def _checked(scores, name: str) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} score set is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} scores contain non-finite values")
    return arr


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks where tied values share the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(id_scores, ood_scores) -> float:
    """Probability a detector ranks an anomalous image above a nominal one,
    counting ties as half."""
    nominal = _checked(id_scores, "in-distribution")
    anomalous = _checked(ood_scores, "out-of-distribution")
    pooled = np.concatenate([nominal, anomalous])
    ranks = _midranks(pooled)
    n0, n1 = len(nominal), len(anomalous)
    rank_sum = float(np.sum(ranks[n0:]))
    return (rank_sum - n1 * (n1 + 1) / 2.0) / (n0 * n1)


def roc_points(id_scores, ood_scores) -> np.ndarray:
    """(false-positive rate, true-positive rate) pairs, sweeping a
    ``score >= threshold`` rule over every distinct score, descending."""
    nominal = _checked(id_scores, "in-distribution")
    anomalous = _checked(ood_scores, "out-of-distribution")
    points = [(0.0, 0.0)]
    fp = tp = 0
    n0, n1 = len(nominal), len(anomalous)
    for threshold in np.unique(np.concatenate([nominal, anomalous]))[::-1]:
        fp += int(np.sum(nominal == threshold))
        tp += int(np.sum(anomalous == threshold))
        points.append((fp / n0, tp / n1))
    return np.array(points)


def trapezoid_area(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    integrate = getattr(np, "trapezoid", None) or np.trapz
    return float(integrate(points[:, 1], points[:, 0]))


def pooled_histogram(id_scores, ood_scores, bins: int = 20):
    """Shared equal-width bins over the pooled score range.

    Returns (edges, nominal_counts, anomalous_counts).  A degenerate
    pool (all scores equal) gets one unit-wide bin centred on the value.
    """
    nominal = _checked(id_scores, "in-distribution")
    anomalous = _checked(ood_scores, "out-of-distribution")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    pooled = np.concatenate([nominal, anomalous])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        edges = np.array([lo - 0.5, hi + 0.5])
    else:
        edges = np.linspace(lo, hi, bins + 1)
    counts_nominal, _ = np.histogram(nominal, bins=edges)
    counts_anomalous, _ = np.histogram(anomalous, bins=edges)
    return edges, counts_nominal, counts_anomalous


def summarize(id_scores, ood_scores, histogram_bins: int = 20) -> dict:
    """Everything the evaluation report needs, as plain JSON-ready types."""
    nominal = _checked(id_scores, "in-distribution")
    anomalous = _checked(ood_scores, "out-of-distribution")
    edges, counts_nominal, counts_anomalous = pooled_histogram(
        nominal, anomalous, bins=histogram_bins
    )
    return {
        "auc": auc(nominal, anomalous),
        "n_in_dist": int(len(nominal)),
        "n_ood": int(len(anomalous)),
        "score_mean": {
            "in_dist": float(np.mean(nominal)),
            "ood": float(np.mean(anomalous)),
        },
        "roc": [[float(f), float(t)] for f, t in roc_points(nominal, anomalous)],
        "score_histogram": {
            "bin_edges": [float(e) for e in edges],
            "in_dist": [int(c) for c in counts_nominal],
            "ood": [int(c) for c in counts_anomalous],
        },
    }


@dataclass(frozen=True)
class BaselineReport:
    per_level_magnitude: dict[int, float]
    scoring_levels: tuple[int, ...]
    score: float


def wavelet_magnitude_score(image: np.ndarray, levels: list[int] | None = None) -> BaselineReport:
    """Training-free detector: mean absolute detail coefficient per level,
    averaged over the same levels the flow-based scorer uses."""
    pyramid = build_pyramid(np.asarray(image, dtype=np.float64))
    magnitudes = {
        lvl.level_index: float(np.mean(np.abs(lvl.detail))) for lvl in pyramid.levels
    }
    if levels is None:
        chosen = tuple(
            sorted(
                lvl.level_index
                for lvl in pyramid.levels
                if lvl.detail.shape[-1] >= MIN_SCORING_SIZE
            )
        )
    else:
        chosen = tuple(sorted(levels))
        unknown = set(chosen) - set(magnitudes)
        if unknown:
            raise ValueError(f"unknown levels {sorted(unknown)}; image has {sorted(magnitudes)}")
    if not chosen:
        raise ValueError(
            f"no level of size >= {MIN_SCORING_SIZE} to score; pass explicit levels"
        )
    score = float(np.mean([magnitudes[lvl] for lvl in chosen]))
    return BaselineReport(per_level_magnitude=magnitudes, scoring_levels=chosen, score=score)


def metrics_json(payload: dict) -> str:
    """Canonical serialization: sorted keys, two-space indent, newline at
    the end, and nothing run-dependent (no timestamps, no hostnames)."""
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"
