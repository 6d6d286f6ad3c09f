"""Ranking metrics for multi-label next-visit prediction, plus simple baselines."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .ehr import Sample


def topk(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if k <= 0:
        raise ValueError("k must be positive")
    if s.ndim == 1:
        return np.argsort(-s, kind="stable")[:k]
    return np.argsort(-s, axis=-1, kind="stable")[..., :k]


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"scores must be (n, C), got shape {s.shape}")
    if len(labels) != s.shape[0]:
        raise ValueError(f"{s.shape[0]} score rows but {len(labels)} label sets")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores contain non-finite values")
    return s


def visit_precision_at_k(scores, labels: Sequence[Iterable[int]], k: int) -> float:
    """Mean over instances of ``|topk ∩ Y| / min(k, |Y|)``."""
    s = _check(scores, labels)
    if s.shape[0] == 0:
        raise ValueError("no instances")
    top = topk(s, k)
    vals = []
    for row, y in zip(top, labels):
        y = set(int(i) for i in y)
        if not y:
            raise ValueError("instance with an empty label set")
        vals.append(len(y.intersection(row.tolist())) / min(k, len(y)))
    return float(np.mean(vals))


def code_accuracy_at_k(scores, labels: Sequence[Iterable[int]], k: int) -> float:
    """Micro-averaged ``sum |topk ∩ Y| / sum |Y|``."""
    s = _check(scores, labels)
    top = topk(s, k)
    hits = total = 0
    for row, y in zip(top, labels):
        y = set(int(i) for i in y)
        hits += len(y.intersection(row.tolist()))
        total += len(y)
    if total == 0:
        raise ValueError("no positive labels")
    return hits / total


METRICS = {"visit_precision": visit_precision_at_k, "code_accuracy": code_accuracy_at_k}


def evaluate_scores(scores, labels, ks: Sequence[int] = (10, 20)) -> dict[str, float]:
    return {f"{name}@{k}": fn(scores, labels, k) for name, fn in METRICS.items() for k in ks}


@dataclass
class MetricReport:
    entries: list[dict]

    @classmethod
    def from_runs(cls, runs: Sequence[dict[str, float]]) -> "MetricReport":
        """Aggregate per-run ``{"visit_precision@10": x, ...}`` dicts into mean/std rows."""
        if not runs:
            raise ValueError("no runs")
        entries = []
        for key in runs[0]:
            name, k = key.rsplit("@", 1)
            vals = np.array([r[key] for r in runs])
            entries.append(
                {"metric": name, "k": int(k), "mean": float(vals.mean()), "std": float(vals.std()), "n_runs": len(runs)}
            )
        return cls(entries)

    def to_json(self) -> list[dict]:
        return list(self.entries)


class FrequencyPrior:
    """Scores every instance with the training-set label frequencies."""

    def __init__(self, n_labels: int):
        self.counts = np.zeros(n_labels)

    def fit(self, samples: Iterable[Sample]) -> "FrequencyPrior":
        for s in samples:
            self.counts[list(s.labels)] += 1
        return self

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        return np.tile(self.counts, (len(samples), 1))


class RepeatLastVisit:
    """Scores label groups seen in earlier visits, recent ones highest, frequency prior as tiebreak."""

    def __init__(self, label_of, n_labels: int, prior: FrequencyPrior | None = None):
        self.label_of = label_of
        self.n_labels = n_labels
        self.prior = prior

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        out = np.zeros((len(samples), self.n_labels))
        base = None
        if self.prior is not None:
            base = self.prior.counts / max(self.prior.counts.sum(), 1.0)
        for i, s in enumerate(samples):
            for age, v in enumerate(reversed(s.history[:-1])):
                for c in v.diagnoses:
                    out[i, self.label_of(c.code)] += 0.5**age
            if base is not None:
                out[i] += 1e-3 * base
        return out


def auc(scores, positives) -> float:
    """Rank-based ROC AUC (Mann-Whitney U with average ranks for ties)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both positives and negatives")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
