"""Brute-force reference implementations used to certify the package.

The metric oracles recompute each metric from first principles with
explicit loops and pair counting, independent of the vectorized
implementations under test. The standalone supervised trainer reimplements
plain cross-entropy SGD from scratch; it mirrors the production kernels'
expression order so trajectories can be compared for exact float equality.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from wisteria.rng import stream


# -- metric oracles --------------------------------------------------------


def auroc_oracle(scores, labels) -> float:
    """Exhaustive concordant/discordant pair counting, ties worth 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    numerator = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                numerator += 1.0
            elif p == q:
                numerator += 0.5
    return numerator / (len(pos) * len(neg))


def auprc_oracle(scores, labels) -> float:
    """Average precision via per-positive rank counting (O(n^2))."""
    n = len(scores)

    def ranks_before(i):
        # items strictly ahead of i under (descending score, ascending index)
        count = 0
        pos_count = 0
        for j in range(n):
            if j == i:
                continue
            if scores[j] > scores[i] or (scores[j] == scores[i] and j < i):
                count += 1
                if labels[j] == 1:
                    pos_count += 1
        return count, pos_count

    entries = []
    for i in range(n):
        if labels[i] != 1:
            continue
        ahead, pos_ahead = ranks_before(i)
        rank = ahead + 1
        entries.append((rank, (pos_ahead + 1) / rank))
    entries.sort()
    total = 0.0
    for _, precision in entries:
        total += precision
    return total / len(entries)


def macro_f1_oracle(pred, true, num_classes) -> float:
    total = 0.0
    for c in range(num_classes):
        tp = sum(1 for p, t in zip(pred, true) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, true) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, true) if p != c and t == c)
        denom = 2 * tp + fp + fn
        total += (2 * tp / denom) if denom > 0 else 0.0
    return total / num_classes


def ece_oracle(probs, labels, num_bins) -> float:
    """Right-closed equal-width bins, accumulated in data order."""
    conf_sums = [0.0] * num_bins
    acc_sums = [0.0] * num_bins
    counts = [0] * num_bins
    for p, y in zip(probs, labels):
        b = min(num_bins - 1, max(0, math.ceil(p * num_bins) - 1))
        conf_sums[b] += p
        acc_sums[b] += y
        counts[b] += 1
    n = len(probs)
    total = 0.0
    for b in range(num_bins):
        if counts[b] == 0:
            continue
        total += (counts[b] / n) * abs(acc_sums[b] / counts[b] - conf_sums[b] / counts[b])
    return total


def ari_oracle(assignments, truths) -> float:
    """Pair-type counting over all point pairs."""
    n = len(assignments)
    a = b = c = d = 0
    for i in range(n):
        for j in range(i + 1, n):
            same_assign = assignments[i] == assignments[j]
            same_truth = truths[i] == truths[j]
            if same_assign and same_truth:
                a += 1
            elif same_assign:
                b += 1
            elif same_truth:
                c += 1
            else:
                d += 1
    denominator = (a + b) * (b + d) + (a + c) * (c + d)
    if denominator == 0:
        return 1.0
    return float(Fraction(2 * (a * d - b * c), denominator))


def recall_at_k_oracle(embeddings, classes, k) -> float:
    n = len(embeddings)
    hits = 0
    for i in range(n):
        candidates = []
        for j in range(n):
            if j == i:
                continue
            d2 = 0.0
            for a_coord, b_coord in zip(embeddings[i], embeddings[j]):
                diff = a_coord - b_coord
                d2 += diff * diff
            candidates.append((d2, j))
        candidates.sort()
        if any(classes[j] == classes[i] for _, j in candidates[:k]):
            hits += 1
    return hits / n


# -- standalone supervised trainer -----------------------------------------


def standalone_supervised_train(
    enc_w, enc_b, head_w0, head_b0, activation, x, targets,
    *, eps_clamp, batch_size, learning_rate, momentum, epochs, seed,
):
    """Plain supervised cross-entropy SGD with momentum, from scratch.

    ``targets`` is records x nodes (one supervision view). Returns the list
    of per-epoch parameter snapshots (enc_w, enc_b, head_w, head_b).
    Expression order intentionally mirrors the production kernels so the
    comparison can demand exact float equality.
    """
    enc_w = enc_w.copy()
    enc_b = enc_b.copy()
    head_w = head_w0.copy()
    head_b = head_b0.copy()
    v_enc_w = np.zeros_like(enc_w)
    v_enc_b = np.zeros_like(enc_b)
    v_head_w = np.zeros_like(head_w)
    v_head_b = np.zeros_like(head_b)
    n = x.shape[0]
    snapshots = []
    for epoch in range(epochs):
        perm = stream(seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            xb = x[idx]
            yb = targets[idx]
            nb = xb.shape[0]
            a = xb @ enc_w.T + enc_b
            h = np.tanh(a) if activation == "tanh" else a
            logits = h @ head_w.T + head_b
            z = logits - np.max(logits, axis=-1, keepdims=True)
            e = np.exp(z)
            p = e / e.sum(axis=-1, keepdims=True)
            clamped = np.maximum(p, eps_clamp)
            d_p = np.where(p >= eps_clamp, -yb / clamped, 0.0)
            d_p = d_p / nb
            d_s = p * (d_p - (d_p * p).sum(axis=1, keepdims=True))
            g_head_w = d_s.T @ h
            g_head_b = d_s.sum(axis=0)
            d_h = d_s @ head_w
            d_a = d_h * (1.0 - h * h) if activation == "tanh" else d_h
            g_enc_w = d_a.T @ xb
            g_enc_b = d_a.sum(axis=0)
            v_enc_w = momentum * v_enc_w + g_enc_w
            v_enc_b = momentum * v_enc_b + g_enc_b
            v_head_w = momentum * v_head_w + g_head_w
            v_head_b = momentum * v_head_b + g_head_b
            enc_w = enc_w - learning_rate * v_enc_w
            enc_b = enc_b - learning_rate * v_enc_b
            head_w = head_w - learning_rate * v_head_w
            head_b = head_b - learning_rate * v_head_b
        snapshots.append((enc_w.copy(), enc_b.copy(), head_w.copy(), head_b.copy()))
    return snapshots
