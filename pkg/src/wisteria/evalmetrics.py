"""Evaluation metrics, each validated against a brute-force oracle in tests.

Conventions, fixed here because they matter for reproducibility:

* AUROC: Mann-Whitney formulation, ties counted one half.
* AUPRC: average precision, precision at each positive's rank; ranking by
  descending score with ties broken by original index (stable).
* macro-F1: unweighted class mean; classes with no predictions and no
  truths contribute F1 = 0.
* ECE: equal-width right-closed bins on [0, 1] (default 10); empty bins
  are skipped.
* ARI: pair-counting formula on the contingency table, computed in exact
  integer arithmetic; defined as 1.0 when both partitions are trivial in
  the same way (the chance-adjustment denominator vanishes).
* Recall@k: a point scores when at least one of its k nearest Euclidean
  neighbors (self excluded, distance ties broken by index) shares its
  class.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, MetricError
from .model import ModelParams, encode, forward_all, head_forward

REPORT_FORMAT = "report-v1"


def _binary_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.size == 0:
        raise MetricError("labels must be a non-empty 1-D sequence")
    if not np.all(np.isin(arr, (0, 1))):
        raise MetricError("labels must be 0 or 1")
    return arr.astype(np.int64)


def _scores(scores, n: int) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.shape != (n,):
        raise MetricError("scores and labels must have equal length")
    if not np.all(np.isfinite(arr)):
        raise MetricError("scores must be finite")
    return arr


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties at 1/2."""
    y = _binary_labels(labels)
    s = _scores(scores, y.size)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC is undefined without both classes present")
    order = np.argsort(s, kind="mergesort")
    ranked = s[order]
    ranks = np.empty(y.size, dtype=np.float64)
    i = 0
    while i < y.size:
        j = i
        while j < y.size and ranked[j] == ranked[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average 1-based rank of the tie group
        i = j
    u_stat = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u_stat / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over positives under stable descending-score order."""
    y = _binary_labels(labels)
    s = _scores(scores, y.size)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUPRC is undefined without positives")
    order = np.lexsort((np.arange(y.size), -s))
    hits = y[order]
    cum_pos = np.cumsum(hits)
    precision = cum_pos / np.arange(1, y.size + 1)
    return float(precision[hits == 1].sum() / n_pos)


def macro_f1(pred_classes, true_classes, num_classes: int) -> float:
    pred = np.asarray(pred_classes, dtype=np.int64)
    true = np.asarray(true_classes, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise MetricError("predictions and truths must be 1-D and equal length")
    if np.any(pred < 0) or np.any(pred >= num_classes):
        raise MetricError("predicted class out of range")
    if np.any(true < 0) or np.any(true >= num_classes):
        raise MetricError("true class out of range")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - np.diag(cm)
    fn = cm.sum(axis=1) - np.diag(cm)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return float(f1.sum() / num_classes)


def _bin_index(probs: np.ndarray, num_bins: int) -> np.ndarray:
    return np.clip(np.ceil(probs * num_bins).astype(np.int64) - 1, 0, num_bins - 1)


def ece(probs, labels, num_bins: int = 10) -> float:
    """Bin-weighted mean absolute gap between confidence and accuracy."""
    y = _binary_labels(labels)
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (y.size,):
        raise MetricError("probs and labels must have equal length")
    if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
        raise MetricError("probs must lie in [0, 1]")
    if num_bins < 1:
        raise MetricError("num_bins must be at least 1")
    bins = _bin_index(p, num_bins)
    counts = np.bincount(bins, minlength=num_bins)
    conf_sums = np.bincount(bins, weights=p, minlength=num_bins)
    acc_sums = np.bincount(bins, weights=y.astype(np.float64), minlength=num_bins)
    total = 0.0
    for b in range(num_bins):
        if counts[b] == 0:
            continue
        total += (counts[b] / y.size) * abs(
            acc_sums[b] / counts[b] - conf_sums[b] / counts[b]
        )
    return float(total)


def reliability_curve(probs, labels, num_bins: int = 10) -> list[dict]:
    """Per-bin confidence, accuracy, count rows for external plotting."""
    y = _binary_labels(labels)
    p = np.asarray(probs, dtype=np.float64)
    bins = _bin_index(p, num_bins)
    rows = []
    for b in range(num_bins):
        mask = bins == b
        count = int(mask.sum())
        rows.append(
            {
                "bin_lo": b / num_bins,
                "bin_hi": (b + 1) / num_bins,
                "count": count,
                "confidence": float(p[mask].mean()) if count else 0.0,
                "accuracy": float(y[mask].mean()) if count else 0.0,
            }
        )
    return rows


def reliability_curve_csv(probs, labels, num_bins: int = 10) -> str:
    rows = reliability_curve(probs, labels, num_bins)
    lines = ["bin_lo,bin_hi,count,confidence,accuracy"]
    for r in rows:
        lines.append(
            f"{r['bin_lo']!r},{r['bin_hi']!r},{r['count']},{r['confidence']!r},{r['accuracy']!r}"
        )
    return "\n".join(lines) + "\n"


def ari(assignments, truths) -> float:
    """Adjusted Rand index via exact pair counting on the contingency table."""
    a = list(assignments)
    b = list(truths)
    if len(a) != len(b):
        raise MetricError("assignments and truths must have equal length")
    n = len(a)
    if n < 2:
        raise MetricError("ARI needs at least two points")
    cells = Counter(zip(a, b))
    index = sum(comb(c, 2) for c in cells.values())
    sum_rows = sum(comb(c, 2) for c in Counter(a).values())
    sum_cols = sum(comb(c, 2) for c in Counter(b).values())
    total = comb(n, 2)
    denominator = total * (sum_rows + sum_cols) - 2 * sum_rows * sum_cols
    if denominator == 0:
        # Both partitions trivial in the same direction; they are identical.
        return 1.0
    return float(Fraction(2 * (total * index - sum_rows * sum_cols), denominator))


def recall_at_k(embeddings, classes, k: int) -> float:
    """Fraction of points with a same-class neighbor among their k nearest."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(classes)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise MetricError("embeddings and classes are misaligned")
    n = x.shape[0]
    if k < 1:
        raise MetricError("k must be at least 1")
    if k >= n:
        raise MetricError("k must be smaller than the number of points")
    diffs = x[:, None, :] - x[None, :, :]
    d2 = (diffs * diffs).sum(axis=-1)
    idx = np.arange(n)
    hits = 0
    for i in range(n):
        order = np.lexsort((idx, d2[i]))
        neighbors = order[order != i][:k]
        if np.any(y[neighbors] == y[i]):
            hits += 1
    return hits / n


def ensemble_predict(params: ModelParams, x: np.ndarray, leaf_ids) -> np.ndarray:
    """Mean of the K head distributions restricted to leaves, renormalized."""
    probs = forward_all(params, x)
    mean = probs.mean(axis=0)
    leaves = mean[list(leaf_ids)]
    return leaves / leaves.sum()


def ensemble_predict_batch(params: ModelParams, xs: np.ndarray, leaf_ids) -> np.ndarray:
    """Row-wise ensemble_predict for a batch of inputs."""
    h = encode(params, np.asarray(xs, dtype=np.float64))
    acc = np.zeros((h.shape[0], params.num_nodes))
    for j in range(params.num_heads):
        acc += head_forward(params, j, h)
    mean = acc / params.num_heads
    leaves = mean[:, list(leaf_ids)]
    return leaves / leaves.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    per_seed: tuple[float, ...]

    def __post_init__(self):
        if self.std < 0.0:
            raise ConfigError("std must be >= 0")
        if self.per_seed and abs(self.mean - sum(self.per_seed) / len(self.per_seed)) > 1e-12:
            raise ConfigError("mean does not match per-seed values")


@dataclass(frozen=True)
class EvalReport:
    """Named metrics with per-seed values plus a config echo."""

    metrics: Mapping[str, MetricSummary]
    metadata: Mapping[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {
            "format": REPORT_FORMAT,
            "metrics": {
                name: {
                    "mean": s.mean,
                    "std": s.std,
                    "per_seed": list(s.per_seed),
                }
                for name, s in self.metrics.items()
            },
            "metadata": self.metadata,
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        obj = json.loads(text)
        if obj.get("format") != REPORT_FORMAT:
            raise ConfigError(f"unsupported report format {obj.get('format')!r}")
        metrics = {
            name: MetricSummary(
                mean=float(m["mean"]),
                std=float(m["std"]),
                per_seed=tuple(float(v) for v in m["per_seed"]),
            )
            for name, m in obj["metrics"].items()
        }
        return EvalReport(metrics=metrics, metadata=obj.get("metadata", {}))


def aggregate_metrics(
    per_seed_metrics: Sequence[Mapping[str, float]],
    seeds: Sequence[int],
    metadata: Mapping[str, object] | None = None,
) -> EvalReport:
    """Mean and sample std (n-1) per metric across seed runs, in seed order."""
    if len(per_seed_metrics) != len(seeds) or not seeds:
        raise ConfigError("need one metric mapping per seed")
    names = list(per_seed_metrics[0].keys())
    for m in per_seed_metrics[1:]:
        if list(m.keys()) != names:
            raise ConfigError("metric names differ across seeds")
    metrics = {}
    for name in names:
        vals = [float(m[name]) for m in per_seed_metrics]
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        metrics[name] = MetricSummary(mean=mean, std=std, per_seed=tuple(vals))
    meta = dict(metadata or {})
    meta["seeds"] = list(int(s) for s in seeds)
    return EvalReport(metrics=metrics, metadata=meta)


def seeded_report(
    run_fn: Callable[[int], Mapping[str, float]],
    seeds: Sequence[int],
    metadata: Mapping[str, object] | None = None,
) -> EvalReport:
    """Run a metric function once per seed and aggregate the results."""
    per_seed = [run_fn(int(s)) for s in seeds]
    return aggregate_metrics(per_seed, seeds, metadata)
