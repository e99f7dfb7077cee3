"""Shared encoder with one softmax prediction head per supervision operator.

The encoder is a single affine layer with an optional tanh, the smallest
family that keeps analytic gradients tractable while still being nonlinear.
Heads emit probability vectors over every graph node; downstream
classification reads only the leaf entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rng import stream

CHECKPOINT_FORMAT = "ckpt-v1"

ACTIVATIONS = ("identity", "tanh")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    hidden_dim: int
    num_nodes: int
    num_heads: int
    activation: str = "tanh"
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 1 or self.hidden_dim < 1 or self.num_nodes < 1:
            raise ConfigError("model dimensions must be positive")
        if self.num_heads < 1:
            raise ConfigError("num_heads must be at least 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.init_scale <= 0.0:
            raise ConfigError("init_scale must be positive")


@dataclass(frozen=True)
class ModelParams:
    """Encoder weights plus stacked head weights.

    Arrays are owned by the instance and must not be mutated in place;
    training steps build fresh instances.
    """

    enc_w: np.ndarray  # hidden_dim x feature_dim
    enc_b: np.ndarray  # hidden_dim
    head_w: np.ndarray  # num_heads x num_nodes x hidden_dim
    head_b: np.ndarray  # num_heads x num_nodes
    activation: str

    def __post_init__(self):
        for name in ("enc_w", "enc_b", "head_w", "head_b"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        d_h, d_x = self.enc_w.shape
        if self.enc_b.shape != (d_h,):
            raise ConfigError("enc_b length must match encoder rows")
        k, v, hd = self.head_w.shape
        if hd != d_h or self.head_b.shape != (k, v):
            raise ConfigError("head shapes are inconsistent with the encoder")

    @property
    def num_heads(self) -> int:
        return self.head_w.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.head_w.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.enc_w.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.enc_w.shape[0]


def init_params(config: ModelConfig) -> ModelParams:
    """Uniform(-init_scale/sqrt(fan_in), +...) weights, zero biases."""
    enc_bound = config.init_scale / np.sqrt(config.feature_dim)
    enc_w = stream(config.seed, "encoder").uniform(
        -enc_bound, enc_bound, size=(config.hidden_dim, config.feature_dim)
    )
    head_bound = config.init_scale / np.sqrt(config.hidden_dim)
    head_w = np.stack(
        [
            stream(config.seed, "head", k).uniform(
                -head_bound, head_bound, size=(config.num_nodes, config.hidden_dim)
            )
            for k in range(config.num_heads)
        ]
    )
    return ModelParams(
        enc_w=enc_w,
        enc_b=np.zeros(config.hidden_dim),
        head_w=head_w,
        head_b=np.zeros((config.num_heads, config.num_nodes)),
        activation=config.activation,
    )


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction for overflow safety."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def encode(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """act(enc_w . x + enc_b); accepts one vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.feature_dim:
        raise ConfigError(
            f"input dimension {x.shape[-1]} does not match feature_dim {params.feature_dim}"
        )
    a = x @ params.enc_w.T + params.enc_b
    if params.activation == "tanh":
        return np.tanh(a)
    return a


def head_forward(params: ModelParams, k: int, h: np.ndarray) -> np.ndarray:
    """Probability vector over nodes from head k; accepts a vector or batch."""
    if not (0 <= k < params.num_heads):
        raise ConfigError(f"head index {k} out of range for {params.num_heads} heads")
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.hidden_dim:
        raise ConfigError("hidden vector length does not match hidden_dim")
    logits = h @ params.head_w[k].T + params.head_b[k]
    return stable_softmax(logits)


def forward_all(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """All K head distributions for one input, sharing a single encoding."""
    h = encode(params, x)
    return np.stack([head_forward(params, k, h) for k in range(params.num_heads)])


def params_to_vector(params: ModelParams) -> np.ndarray:
    return np.concatenate(
        [
            params.enc_w.ravel(),
            params.enc_b.ravel(),
            params.head_w.ravel(),
            params.head_b.ravel(),
        ]
    )


def vector_to_params(vec: np.ndarray, like: ModelParams) -> ModelParams:
    vec = np.asarray(vec, dtype=np.float64)
    sizes = [like.enc_w.size, like.enc_b.size, like.head_w.size, like.head_b.size]
    if vec.size != sum(sizes):
        raise ConfigError("vector length does not match parameter count")
    parts = np.split(vec, np.cumsum(sizes)[:-1])
    return ModelParams(
        enc_w=parts[0].reshape(like.enc_w.shape),
        enc_b=parts[1].reshape(like.enc_b.shape),
        head_w=parts[2].reshape(like.head_w.shape),
        head_b=parts[3].reshape(like.head_b.shape),
        activation=like.activation,
    )


def checkpoint_to_bytes(params: ModelParams) -> bytes:
    header = {
        "format": CHECKPOINT_FORMAT,
        "feature_dim": params.feature_dim,
        "hidden_dim": params.hidden_dim,
        "num_nodes": params.num_nodes,
        "num_heads": params.num_heads,
        "activation": params.activation,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    blob += params.enc_w.astype("<f8").tobytes(order="C")
    blob += params.enc_b.astype("<f8").tobytes(order="C")
    blob += params.head_w.astype("<f8").tobytes(order="C")
    blob += params.head_b.astype("<f8").tobytes(order="C")
    return blob


def checkpoint_from_bytes(blob: bytes) -> ModelParams:
    newline = blob.find(b"\n")
    if newline < 0:
        raise ConfigError("checkpoint is missing its header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(
            f"unsupported checkpoint format {header.get('format')!r}"
        )
    d_x = int(header["feature_dim"])
    d_h = int(header["hidden_dim"])
    v = int(header["num_nodes"])
    k = int(header["num_heads"])
    body = np.frombuffer(blob, dtype="<f8", offset=newline + 1)
    sizes = [d_h * d_x, d_h, k * v * d_h, k * v]
    if body.size != sum(sizes):
        raise ConfigError("checkpoint payload size does not match its header")
    parts = np.split(body, np.cumsum(sizes)[:-1])
    return ModelParams(
        enc_w=parts[0].reshape(d_h, d_x).copy(),
        enc_b=parts[1].copy(),
        head_w=parts[2].reshape(k, v, d_h).copy(),
        head_b=parts[3].reshape(k, v).copy(),
        activation=str(header["activation"]),
    )


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    return checkpoint_from_bytes(Path(path).read_bytes())
