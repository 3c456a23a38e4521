"""Ranking metrics for the attack evaluations.

Average precision is computed from its step-wise definition over the
descending-score ranking (ties kept in stable input order), not delegated
to a library; the test suite compares it against a direct-summation oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ScoredPredictions:
    """Per-row score vectors plus the true label for each row."""

    scores: np.ndarray  # (n, n_labels) float
    labels: np.ndarray  # (n,) int

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.ndim != 2:
            raise ValueError(f"scores must be 2-d, got shape {self.scores.shape}")
        if self.labels.shape != (self.scores.shape[0],):
            raise ValueError("labels must be a vector with one entry per score row")

    @property
    def n_labels(self) -> int:
        return self.scores.shape[1]


@dataclass
class MeanApResult:
    per_label: dict[int, float]
    mean_ap: float
    skipped: tuple[int, ...]  # labels dropped for lack of positives


def average_precision(scores, positives) -> float:
    """AP = sum_n (R_n - R_{n-1}) * P_n over the descending-score ranking.

    Ties are broken by stable input order. Requires at least one positive.
    """
    s = np.asarray(scores, dtype=np.float64)
    p = np.asarray(positives)
    if s.ndim != 1 or p.ndim != 1 or s.shape != p.shape:
        raise ValueError(f"scores and positives must be equal-length vectors")
    if s.size == 0:
        raise ValueError("empty input")
    hits = p.astype(bool)
    n_pos = int(hits.sum())
    if n_pos == 0:
        raise ValueError("no positives in ranking")
    order = np.argsort(-s, kind="stable")
    ranked_hits = hits[order].astype(np.float64)
    cum_hits = np.cumsum(ranked_hits)
    precision = cum_hits / np.arange(1, s.size + 1)
    return float((precision * ranked_hits).sum() / n_pos)


def mean_ap(preds: ScoredPredictions, n_labels: int | None = None) -> MeanApResult:
    """One-vs-rest AP per label, averaged over labels that have positives.

    Labels with no positive rows are skipped and reported in the result.
    """
    if n_labels is None:
        n_labels = preds.n_labels
    if n_labels != preds.n_labels:
        raise ValueError(f"preds carry {preds.n_labels} score columns, asked for {n_labels}")
    per_label: dict[int, float] = {}
    skipped: list[int] = []
    for label in range(n_labels):
        positives = preds.labels == label
        if not positives.any():
            skipped.append(label)
            continue
        per_label[label] = average_precision(preds.scores[:, label], positives)
    if not per_label:
        raise ValueError("every label lacks positives")
    mean = float(np.mean(list(per_label.values())))
    return MeanApResult(per_label=per_label, mean_ap=mean, skipped=tuple(skipped))


def topk_accuracy(preds: ScoredPredictions, k: int) -> float:
    """Fraction of rows whose true label is among the k highest scores
    (ties resolved in stable column order)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, preds.n_labels)
    order = np.argsort(-preds.scores, axis=1, kind="stable")[:, :k]
    hit = (order == preds.labels[:, None]).any(axis=1)
    return float(hit.mean())


def increase_over_chance(ap: float, chance_ap: float) -> float:
    """Ratio of achieved AP to the chance-level AP."""
    if chance_ap <= 0.0:
        raise ValueError(f"chance AP must be positive, got {chance_ap}")
    return ap / chance_ap


def chance_level(labels, n_labels: int) -> tuple[dict[int, float], float]:
    """Empirical per-label prevalence and its mean over present labels.

    This is the chance-level AP of an uninformed ranker.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty labels")
    per_label: dict[int, float] = {}
    for label in range(n_labels):
        count = int((labels == label).sum())
        if count:
            per_label[label] = count / labels.size
    mean = float(np.mean(list(per_label.values())))
    return per_label, mean
