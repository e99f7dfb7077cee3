"""Training objective: supervision fit + cross-view agreement + graph smoothness.

For each record and head k the fit term is cross-entropy between the head's
distribution and that operator's pseudo-label view. The agreement term sums
a divergence over ordered head pairs (k, k'), k != k', so the symmetric-KL
instantiation is counted twice; reported weights assume that convention.
The graph term is the Laplacian quadratic form of each head's distribution.
All three terms are means over the batch, so the weights lam and gamma are
batch-size independent. Gradients are assembled by backpropagation through
softmax, heads, activation, and encoder, and are certified against the
central finite-difference oracle also defined here.

Probabilities are clamped at ``eps_clamp`` before any log; gradients are
zero on clamped coordinates.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError
from .model import ModelParams, params_to_vector, stable_softmax, vector_to_params
from .ontology import Laplacian
from .rng import stream

AGREEMENT_KINDS = ("sym_kl", "sq_dist")


@dataclass(frozen=True)
class LossConfig:
    lam: float  # agreement weight
    gamma: float  # graph weight
    batch_size: int
    learning_rate: float
    epochs: int
    agreement_kind: str = "sym_kl"
    eps_clamp: float = 1e-8
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0.0 or self.gamma < 0.0:
            raise ConfigError("lam and gamma must be >= 0")
        if self.agreement_kind not in AGREEMENT_KINDS:
            raise ConfigError(f"agreement_kind must be one of {AGREEMENT_KINDS}")
        if self.eps_clamp <= 0.0:
            raise ConfigError("eps_clamp must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.learning_rate < 0.0:
            raise ConfigError("learning_rate must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    fit_term: float
    agreement_term: float
    graph_term: float
    total: float

    def check_consistent(self, lam: float, gamma: float) -> None:
        expected = self.fit_term + lam * self.agreement_term + gamma * self.graph_term
        if abs(self.total - expected) > 1e-9:
            raise NumericalError(
                f"loss breakdown inconsistent: total {self.total} vs {expected}"
            )

    def is_finite(self) -> bool:
        return all(
            np.isfinite(v)
            for v in (self.fit_term, self.agreement_term, self.graph_term, self.total)
        )


def cross_entropy(
    pred: np.ndarray, target: np.ndarray, eps_clamp: float = 1e-8
) -> tuple[float, np.ndarray]:
    """-sum(target * log(clamped pred)) and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError("pred and target must have the same shape")
    clamped = np.maximum(pred, eps_clamp)
    value = float(-(target * np.log(clamped)).sum())
    grad = np.where(pred >= eps_clamp, -target / clamped, 0.0)
    return value, grad


def _sym_kl_batch(p, q, eps):
    pc = np.maximum(p, eps)
    qc = np.maximum(q, eps)
    log_ratio = np.log(pc) - np.log(qc)
    value = float((0.5 * (p - q) * log_ratio).sum())
    gp = 0.5 * (log_ratio + (p - q) / pc * (p >= eps))
    gq = 0.5 * (-log_ratio + (q - p) / qc * (q >= eps))
    return value, gp, gq


def _sq_dist_batch(p, q, eps):
    diff = p - q
    value = float((diff * diff).sum())
    return value, 2.0 * diff, -2.0 * diff


_AGREEMENT_FNS = {"sym_kl": _sym_kl_batch, "sq_dist": _sq_dist_batch}


def agreement(
    p: np.ndarray, q: np.ndarray, kind: str = "sym_kl", eps_clamp: float = 1e-8
) -> tuple[float, np.ndarray, np.ndarray]:
    """Divergence between two distributions plus gradients w.r.t. both."""
    if kind not in _AGREEMENT_FNS:
        raise ConfigError(f"unknown agreement kind {kind!r}")
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigError("p and q must have the same shape")
    return _AGREEMENT_FNS[kind](p, q, eps_clamp)


def wisteria_loss(
    params: ModelParams,
    features: np.ndarray,
    views: np.ndarray,
    lap: Laplacian | None,
    cfg: LossConfig,
    want_grad: bool = True,
) -> tuple[LossBreakdown, ModelParams | None]:
    """Batch loss breakdown and, optionally, the full parameter gradient.

    ``features`` is records x feature_dim (never whole records: the training
    path must not see hidden classes); ``views`` is records x K x nodes.
    Terms whose weight is zero are skipped and reported as 0.
    """
    x = np.asarray(features, dtype=np.float64)
    v = np.asarray(views, dtype=np.float64)
    if x.ndim != 2 or v.ndim != 3 or x.shape[0] != v.shape[0]:
        raise ConfigError("batch features and views are misaligned")
    n, k, num_nodes = v.shape
    if k != params.num_heads:
        raise ConfigError(f"views carry {k} operators but model has {params.num_heads} heads")
    if num_nodes != params.num_nodes:
        raise ConfigError("views node dimension does not match the model")
    if cfg.gamma > 0.0 and (lap is None or lap.num_nodes != num_nodes):
        raise ConfigError("graph term requires a Laplacian matching the node count")
    eps = cfg.eps_clamp

    a = x @ params.enc_w.T + params.enc_b
    h = np.tanh(a) if params.activation == "tanh" else a
    probs = [
        stable_softmax(h @ params.head_w[j].T + params.head_b[j]) for j in range(k)
    ]

    fit_sum = 0.0
    d_probs: list[np.ndarray | None] = [None] * k
    for j in range(k):
        clamped = np.maximum(probs[j], eps)
        target = v[:, j, :]
        fit_sum += float(-(target * np.log(clamped)).sum())
        if want_grad:
            d_probs[j] = np.where(probs[j] >= eps, -target / clamped, 0.0)

    agr_sum = 0.0
    if cfg.lam > 0.0 and k > 1:
        divergence = _AGREEMENT_FNS[cfg.agreement_kind]
        for j in range(k):
            for j2 in range(k):
                if j2 == j:
                    continue
                val, gp, gq = divergence(probs[j], probs[j2], eps)
                agr_sum += val
                if want_grad:
                    d_probs[j] = d_probs[j] + cfg.lam * gp
                    d_probs[j2] = d_probs[j2] + cfg.lam * gq

    graph_sum = 0.0
    if cfg.gamma > 0.0:
        m = lap.matrix
        for j in range(k):
            pl = probs[j] @ m
            graph_sum += float((pl * probs[j]).sum())
            if want_grad:
                d_probs[j] = d_probs[j] + cfg.gamma * (2.0 * pl)

    fit_term = fit_sum / n
    agreement_term = agr_sum / n
    graph_term = graph_sum / n
    breakdown = LossBreakdown(
        fit_term=fit_term,
        agreement_term=agreement_term,
        graph_term=graph_term,
        total=fit_term + cfg.lam * agreement_term + cfg.gamma * graph_term,
    )
    if not want_grad:
        return breakdown, None

    d_hidden = np.zeros_like(h)
    g_head_w = np.zeros_like(params.head_w)
    g_head_b = np.zeros_like(params.head_b)
    for j in range(k):
        dp = d_probs[j] / n
        ds = probs[j] * (dp - (dp * probs[j]).sum(axis=1, keepdims=True))
        g_head_w[j] = ds.T @ h
        g_head_b[j] = ds.sum(axis=0)
        d_hidden += ds @ params.head_w[j]
    if params.activation == "tanh":
        d_act = d_hidden * (1.0 - h * h)
    else:
        d_act = d_hidden
    grad = ModelParams(
        enc_w=d_act.T @ x,
        enc_b=d_act.sum(axis=0),
        head_w=g_head_w,
        head_b=g_head_b,
        activation=params.activation,
    )
    return breakdown, grad


def _require_finite(breakdown: LossBreakdown, context: str) -> None:
    for name, value in (
        ("fit", breakdown.fit_term),
        ("agreement", breakdown.agreement_term),
        ("graph", breakdown.graph_term),
        ("total", breakdown.total),
    ):
        if not np.isfinite(value):
            raise NumericalError(f"non-finite {name} term at {context}")


def train(
    params: ModelParams,
    features: np.ndarray,
    views: np.ndarray,
    lap: Laplacian | None,
    cfg: LossConfig,
    epoch_callback: Callable[[int, ModelParams], None] | None = None,
) -> tuple[ModelParams, list[LossBreakdown]]:
    """SGD with momentum over seeded epoch shuffles; one breakdown per epoch.

    The per-epoch trace entry is the full-dataset loss after that epoch's
    updates. Training aborts with a NumericalError naming the offending
    term if any loss value goes non-finite.
    """
    x = np.asarray(features, dtype=np.float64)
    v = np.asarray(views, dtype=np.float64)
    n = x.shape[0]
    velocity = ModelParams(
        enc_w=np.zeros_like(params.enc_w),
        enc_b=np.zeros_like(params.enc_b),
        head_w=np.zeros_like(params.head_w),
        head_b=np.zeros_like(params.head_b),
        activation=params.activation,
    )
    trace: list[LossBreakdown] = []
    for epoch in range(cfg.epochs):
        perm = stream(cfg.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            breakdown, grad = wisteria_loss(params, x[idx], v[idx], lap, cfg)
            _require_finite(breakdown, f"epoch {epoch}, batch offset {start}")
            velocity = ModelParams(
                enc_w=cfg.momentum * velocity.enc_w + grad.enc_w,
                enc_b=cfg.momentum * velocity.enc_b + grad.enc_b,
                head_w=cfg.momentum * velocity.head_w + grad.head_w,
                head_b=cfg.momentum * velocity.head_b + grad.head_b,
                activation=params.activation,
            )
            params = ModelParams(
                enc_w=params.enc_w - cfg.learning_rate * velocity.enc_w,
                enc_b=params.enc_b - cfg.learning_rate * velocity.enc_b,
                head_w=params.head_w - cfg.learning_rate * velocity.head_w,
                head_b=params.head_b - cfg.learning_rate * velocity.head_b,
                activation=params.activation,
            )
        epoch_loss, _ = wisteria_loss(params, x, v, lap, cfg, want_grad=False)
        _require_finite(epoch_loss, f"epoch {epoch} full pass")
        epoch_loss.check_consistent(cfg.lam, cfg.gamma)
        trace.append(epoch_loss)
        if epoch_callback is not None:
            epoch_callback(epoch, params)
    return params, trace


def finite_diff_grad(
    loss_fn: Callable[[ModelParams], float],
    params: ModelParams,
    h_step: float = 1e-5,
) -> ModelParams:
    """Central finite differences over every scalar parameter."""
    if not (1e-7 <= h_step <= 1e-3):
        raise ConfigError("h_step must lie in [1e-7, 1e-3]")
    vec = params_to_vector(params)
    grad = np.empty_like(vec)
    for i in range(vec.size):
        up = vec.copy()
        up[i] += h_step
        down = vec.copy()
        down[i] -= h_step
        grad[i] = (
            loss_fn(vector_to_params(up, params))
            - loss_fn(vector_to_params(down, params))
        ) / (2.0 * h_step)
    return vector_to_params(grad, params)


def trace_to_csv(trace: Sequence[LossBreakdown]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "fit", "agreement", "graph", "total"])
    for i, b in enumerate(trace):
        writer.writerow(
            [i, repr(b.fit_term), repr(b.agreement_term), repr(b.graph_term), repr(b.total)]
        )
    return buf.getvalue()


def save_trace(path: str | Path, trace: Sequence[LossBreakdown]) -> None:
    Path(path).write_text(trace_to_csv(trace), encoding="utf-8")


def trace_from_csv(text: str) -> list[LossBreakdown]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["epoch", "fit", "agreement", "graph", "total"]:
        raise ConfigError("unrecognized loss trace header")
    out = []
    for row in rows[1:]:
        out.append(
            LossBreakdown(
                fit_term=float(row[1]),
                agreement_term=float(row[2]),
                graph_term=float(row[3]),
                total=float(row[4]),
            )
        )
    return out
