"""Weak supervision operators and controlled view corruption.

Three operator families are implemented, each emitting a pseudo-label
distribution over the label graph for a record:

* ``channel``: samples an observed class from a row-stochastic confusion
  matrix conditioned on the record's hidden class (the simulated labeling
  pipeline; the one training-adjacent consumer of ``truth_class``).
* ``ontology_prop``: a channel draw smeared over the graph by geometric
  label propagation.
* ``cooccurrence``: a deterministic linear-score heuristic over the raw
  features with epsilon smoothing; it never sees the hidden class.

Operators applied through ``build_views`` use independent streams keyed by
(seed, operator_id, record index), so errors are conditionally independent
across operators given the hidden class, exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ontology import LabelGraph, propagate_mass
from .rng import stream
from .synthgen import PatientRecord, validate_confusion

VIEWS_MAGIC = b"WSTV"
VIEWS_VERSION = 1
SIDECAR_FORMAT = "wstv-sidecar-v1"

OPERATOR_KINDS = ("channel", "ontology_prop", "cooccurrence")


@dataclass(frozen=True)
class ChannelParams:
    """Confusion channel; ``per_site`` entries override the shared matrix."""

    confusion: np.ndarray | None = None
    per_site: tuple[tuple[int, np.ndarray], ...] | None = None
    soft: bool = False

    def __post_init__(self):
        if self.confusion is None and not self.per_site:
            raise ConfigError("channel needs a confusion matrix or per_site matrices")
        if self.confusion is not None:
            c = np.asarray(self.confusion, dtype=np.float64)
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise ConfigError("channel confusion must be square")
            validate_confusion(c, c.shape[0])
            c.setflags(write=False)
            object.__setattr__(self, "confusion", c)
        if self.per_site is not None:
            frozen = []
            for site_id, m in self.per_site:
                m = np.asarray(m, dtype=np.float64)
                if m.ndim != 2 or m.shape[0] != m.shape[1]:
                    raise ConfigError("per-site confusion must be square")
                validate_confusion(m, m.shape[0])
                m.setflags(write=False)
                frozen.append((int(site_id), m))
            object.__setattr__(self, "per_site", tuple(frozen))

    def confusion_for_site(self, site_id: int) -> np.ndarray:
        if self.per_site:
            for sid, m in self.per_site:
                if sid == site_id:
                    return m
        if self.confusion is None:
            raise ConfigError(f"no confusion matrix configured for site {site_id}")
        return self.confusion


@dataclass(frozen=True)
class OntologyPropParams:
    """Geometric propagation over the graph applied to a base channel draw."""

    alpha: float
    base: ChannelParams

    def __post_init__(self):
        if not (0.0 <= self.alpha < 1.0):
            raise ConfigError("alpha must lie in [0, 1)")


@dataclass(frozen=True)
class CooccurrenceRule:
    """Linear score for one class: max(direction . x, threshold)."""

    direction: np.ndarray
    threshold: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        d.setflags(write=False)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class CooccurrenceParams:
    rules: tuple[CooccurrenceRule, ...]
    eps_rule: float

    def __post_init__(self):
        if not self.rules:
            raise ConfigError("cooccurrence operator needs a non-empty rule list")
        if not (0.0 < self.eps_rule <= 1.0):
            raise ConfigError("eps_rule must lie in (0, 1]")


@dataclass(frozen=True)
class OperatorSpec:
    kind: str
    params: ChannelParams | OntologyPropParams | CooccurrenceParams
    operator_id: int

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ConfigError(f"unknown operator kind {self.kind!r}")
        expected = {
            "channel": ChannelParams,
            "ontology_prop": OntologyPropParams,
            "cooccurrence": CooccurrenceParams,
        }[self.kind]
        if not isinstance(self.params, expected):
            raise ConfigError(
                f"operator kind {self.kind!r} requires {expected.__name__} params"
            )
        if self.operator_id < 0:
            raise ConfigError("operator_id must be non-negative")


@dataclass(frozen=True)
class SupervisionViewSet:
    """Per-record, per-operator pseudo-label distributions over the graph."""

    views: np.ndarray  # num_records x K x num_nodes
    leaf_ids: tuple[int, ...]

    def __post_init__(self):
        v = np.asarray(self.views, dtype=np.float64)
        if v.ndim != 3:
            raise ConfigError("views must be a records x operators x nodes array")
        if np.any(v < 0.0):
            raise ConfigError("views must be nonnegative")
        if np.any(np.abs(v.sum(axis=2) - 1.0) > 1e-9):
            raise ConfigError("each view must sum to 1 within 1e-9")
        v.setflags(write=False)
        object.__setattr__(self, "views", v)
        object.__setattr__(self, "leaf_ids", tuple(int(i) for i in self.leaf_ids))

    @property
    def num_records(self) -> int:
        return self.views.shape[0]

    @property
    def num_operators(self) -> int:
        return self.views.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.views.shape[2]


def _leaf_onehot(graph: LabelGraph, class_index: int) -> np.ndarray:
    vec = np.zeros(graph.num_nodes, dtype=np.float64)
    vec[graph.leaf_ids[class_index]] = 1.0
    return vec


def apply_channel(
    record: PatientRecord,
    confusion: np.ndarray,
    rng: np.random.Generator,
    graph: LabelGraph,
    soft: bool = False,
) -> np.ndarray:
    """Sample an observed class from the record's hidden class and emit its leaf."""
    c = graph.num_classes
    confusion = validate_confusion(confusion, c)
    row = confusion[record.truth_class]
    if soft:
        vec = np.zeros(graph.num_nodes, dtype=np.float64)
        vec[list(graph.leaf_ids)] = row
        return vec
    observed = int(rng.choice(c, p=row))
    return _leaf_onehot(graph, observed)


def apply_ontology_prop(
    base_view: np.ndarray, graph: LabelGraph, alpha: float
) -> np.ndarray:
    """Mix geometric propagation from each support node, weighted by base mass."""
    base = np.asarray(base_view, dtype=np.float64)
    if base.shape != (graph.num_nodes,):
        raise ConfigError("base view length must match the graph")
    if np.any(base < 0.0) or abs(base.sum() - 1.0) > 1e-9:
        raise ConfigError("base view must be a probability vector")
    out = np.zeros(graph.num_nodes, dtype=np.float64)
    for node in np.nonzero(base > 0.0)[0]:
        out += base[node] * propagate_mass(graph, int(node), alpha)
    return out


def apply_cooccurrence(
    record: PatientRecord, params: CooccurrenceParams, graph: LabelGraph
) -> np.ndarray:
    """Thresholded linear scores pick a class; epsilon mass smooths over leaves.

    Ties break toward the lowest class index.
    """
    c = graph.num_classes
    if len(params.rules) != c:
        raise ConfigError(
            f"rule list covers {len(params.rules)} classes, graph has {c}"
        )
    scores = np.array(
        [max(float(rule.direction @ record.x), rule.threshold) for rule in params.rules]
    )
    winner = int(np.argmax(scores))
    vec = np.zeros(graph.num_nodes, dtype=np.float64)
    eps = params.eps_rule
    for leaf in graph.leaf_ids:
        vec[leaf] = eps / c
    vec[graph.leaf_ids[winner]] += 1.0 - eps
    return vec


def default_cooccurrence_rules(prototypes: np.ndarray) -> tuple[CooccurrenceRule, ...]:
    """One rule per class along the unit prototype direction."""
    rules = []
    for proto in np.asarray(prototypes, dtype=np.float64):
        norm = float(np.linalg.norm(proto))
        direction = proto / norm if norm > 0.0 else proto
        rules.append(CooccurrenceRule(direction=direction))
    return tuple(rules)


def _propagation_matrix(graph: LabelGraph, alpha: float) -> np.ndarray:
    rows = [propagate_mass(graph, v, alpha) for v in range(graph.num_nodes)]
    return np.stack(rows)


def build_views(
    dataset: list[PatientRecord],
    specs: list[OperatorSpec],
    graph: LabelGraph,
    seed: int,
) -> SupervisionViewSet:
    """Apply every operator to every record on independent RNG streams."""
    if not specs:
        raise ConfigError("need at least one operator")
    ids = [s.operator_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("operator_id values must be distinct")
    n, k, v = len(dataset), len(specs), graph.num_nodes
    views = np.zeros((n, k, v), dtype=np.float64)
    for col, spec in enumerate(specs):
        if spec.kind == "channel":
            for i, rec in enumerate(dataset):
                rng = stream(seed, "views", spec.operator_id, i)
                views[i, col] = apply_channel(
                    rec,
                    spec.params.confusion_for_site(rec.site_id),
                    rng,
                    graph,
                    soft=spec.params.soft,
                )
        elif spec.kind == "ontology_prop":
            prop = _propagation_matrix(graph, spec.params.alpha)
            for i, rec in enumerate(dataset):
                rng = stream(seed, "views", spec.operator_id, i)
                base = apply_channel(
                    rec,
                    spec.params.base.confusion_for_site(rec.site_id),
                    rng,
                    graph,
                    soft=spec.params.base.soft,
                )
                views[i, col] = base @ prop
        else:
            for i, rec in enumerate(dataset):
                views[i, col] = apply_cooccurrence(rec, spec.params, graph)
    return SupervisionViewSet(views=views, leaf_ids=graph.leaf_ids)


def corrupt_views(
    views: SupervisionViewSet, rho: float, seed: int
) -> SupervisionViewSet:
    """Replace each view with a uniformly random leaf one-hot with probability rho."""
    if not (0.0 <= rho <= 1.0):
        raise ConfigError("rho must lie in [0, 1]")
    n, k, _ = views.views.shape
    out = views.views.copy()
    gen = stream(seed, "corrupt")
    coins = gen.random((n, k))
    draws = gen.integers(0, len(views.leaf_ids), size=(n, k))
    hit_rows, hit_cols = np.nonzero(coins < rho)
    for i, col in zip(hit_rows, hit_cols):
        out[i, col, :] = 0.0
        out[i, col, views.leaf_ids[draws[i, col]]] = 1.0
    return SupervisionViewSet(views=out, leaf_ids=views.leaf_ids)


def _operator_params_to_dict(spec: OperatorSpec) -> dict:
    p = spec.params
    if spec.kind == "channel":
        return _channel_to_dict(p)
    if spec.kind == "ontology_prop":
        return {"alpha": p.alpha, "base": _channel_to_dict(p.base)}
    return {
        "eps_rule": p.eps_rule,
        "rules": [
            {"direction": r.direction.tolist(), "threshold": r.threshold}
            for r in p.rules
        ],
    }


def _channel_to_dict(p: ChannelParams) -> dict:
    out: dict = {"soft": p.soft}
    if p.confusion is not None:
        out["confusion"] = p.confusion.tolist()
    if p.per_site:
        out["per_site"] = {str(sid): m.tolist() for sid, m in p.per_site}
    return out


def _channel_from_dict(data: dict) -> ChannelParams:
    per_site = None
    if "per_site" in data and data["per_site"] is not None:
        per_site = tuple(
            (int(sid), np.asarray(m, dtype=np.float64))
            for sid, m in sorted(data["per_site"].items(), key=lambda kv: int(kv[0]))
        )
    confusion = data.get("confusion")
    return ChannelParams(
        confusion=None if confusion is None else np.asarray(confusion, dtype=np.float64),
        per_site=per_site,
        soft=bool(data.get("soft", False)),
    )


def operator_spec_to_dict(spec: OperatorSpec) -> dict:
    return {
        "kind": spec.kind,
        "operator_id": spec.operator_id,
        "params": _operator_params_to_dict(spec),
    }


def operator_spec_from_dict(data: dict) -> OperatorSpec:
    kind = data["kind"]
    raw = data["params"]
    if kind == "channel":
        params: object = _channel_from_dict(raw)
    elif kind == "ontology_prop":
        params = OntologyPropParams(
            alpha=float(raw["alpha"]), base=_channel_from_dict(raw["base"])
        )
    elif kind == "cooccurrence":
        params = CooccurrenceParams(
            rules=tuple(
                CooccurrenceRule(
                    direction=np.asarray(r["direction"], dtype=np.float64),
                    threshold=float(r.get("threshold", 0.0)),
                )
                for r in raw["rules"]
            ),
            eps_rule=float(raw["eps_rule"]),
        )
    else:
        raise ConfigError(f"unknown operator kind {kind!r}")
    return OperatorSpec(kind=kind, params=params, operator_id=int(data["operator_id"]))


def views_to_bytes(views: SupervisionViewSet) -> bytes:
    n, k, v = views.views.shape
    header = struct.pack("<4sIQII", VIEWS_MAGIC, VIEWS_VERSION, n, k, v)
    return header + views.views.astype("<f8").tobytes(order="C")


def views_sidecar_json(views: SupervisionViewSet, specs: list[OperatorSpec]) -> str:
    obj = {
        "format": SIDECAR_FORMAT,
        "leaf_ids": list(views.leaf_ids),
        "num_nodes": views.num_nodes,
        "operators": [operator_spec_to_dict(s) for s in specs],
    }
    return json.dumps(obj, sort_keys=True) + "\n"


def views_from_bytes(blob: bytes, sidecar_text: str) -> tuple[SupervisionViewSet, list[OperatorSpec]]:
    header_size = struct.calcsize("<4sIQII")
    if len(blob) < header_size:
        raise ConfigError("views file too short for its header")
    magic, version, n, k, v = struct.unpack("<4sIQII", blob[:header_size])
    if magic != VIEWS_MAGIC:
        raise ConfigError("views file magic mismatch")
    if version != VIEWS_VERSION:
        raise ConfigError(f"unsupported views version {version}")
    body = np.frombuffer(blob, dtype="<f8", offset=header_size)
    if body.size != n * k * v:
        raise ConfigError("views payload size does not match header")
    sidecar = json.loads(sidecar_text)
    if sidecar.get("format") != SIDECAR_FORMAT:
        raise ConfigError(
            f"unsupported views sidecar format {sidecar.get('format')!r}"
        )
    specs = [operator_spec_from_dict(d) for d in sidecar["operators"]]
    views = SupervisionViewSet(
        views=body.reshape(n, k, v).astype(np.float64),
        leaf_ids=tuple(int(i) for i in sidecar["leaf_ids"]),
    )
    return views, specs


def save_views(
    path: str | Path,
    sidecar_path: str | Path,
    views: SupervisionViewSet,
    specs: list[OperatorSpec],
) -> None:
    Path(path).write_bytes(views_to_bytes(views))
    Path(sidecar_path).write_text(views_sidecar_json(views, specs), encoding="utf-8")


def load_views(
    path: str | Path, sidecar_path: str | Path
) -> tuple[SupervisionViewSet, list[OperatorSpec]]:
    return views_from_bytes(
        Path(path).read_bytes(), Path(sidecar_path).read_text(encoding="utf-8")
    )
