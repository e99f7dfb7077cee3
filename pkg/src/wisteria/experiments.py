"""Experiment protocols: main benchmark, noise sweep, transfer, ablation, K-scaling.

Every protocol is a pure function of (config, seeds): all stage seeds
(generation, views, corruption, model init, training, holdout split) are
derived from each protocol seed, so reruns are byte-identical. Cells of a
sweep, one per (setting, variant, seed), are independent jobs; the
``WISTERIA_THREADS`` environment variable caps how many run concurrently.

The four tasks the metrics cover are synthetic analogs: a binary
one-vs-rest task on class 0 (AUROC, AUPRC, ECE), the full multiclass task
(macro-F1), and embedding structure (ARI against nearest class prototypes
fit on the training split, Recall@10). That mapping is echoed in report
metadata.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .evalmetrics import (
    EvalReport,
    aggregate_metrics,
    ari,
    auprc,
    auroc,
    ece,
    ensemble_predict_batch,
    macro_f1,
    recall_at_k,
)
from .model import ModelConfig, ModelParams, encode, init_params
from .objective import LossBreakdown, LossConfig, train
from .ontology import LabelGraph, build_tree_ontology, laplacian
from .rng import child_seed, stream
from .supervision import (
    ChannelParams,
    CooccurrenceParams,
    OntologyPropParams,
    OperatorSpec,
    SupervisionViewSet,
    build_views,
    corrupt_views,
    default_cooccurrence_rules,
)
from .synthgen import (
    GenConfig,
    PatientRecord,
    SiteSpec,
    features,
    generate_dataset,
    make_prototypes,
    site_ids,
    truth_classes,
)

PROTOCOLS = ("main", "noise_sweep", "transfer", "ablation", "k_scaling")
VARIANTS = ("full", "no_agreement", "no_graph", "single_view")

VARIANT_LABELS = {
    "full": "full",
    "no_agreement": "w/o agreement term",
    "no_graph": "w/o ontology regularizer",
    "single_view": "single supervision view",
}

METRIC_NAMES = ("auroc", "auprc", "macro_f1", "ece", "ari", "recall_at_10")

HOLDOUT_TEST_FRACTION = 0.2
ECE_BINS = 10
RECALL_K = 10


def _check_keys(data: Mapping, allowed: set[str], context: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")


def _require(data: Mapping, key: str, context: str):
    if key not in data:
        raise ConfigError(f"missing key {key!r} in {context}")
    return data[key]


# -- confusion matrix shorthands ------------------------------------------------


def build_confusion(spec: Mapping, num_classes: int) -> np.ndarray:
    """Materialize a confusion shorthand into a row-stochastic matrix."""
    _check_keys(
        spec, {"kind", "flip_rate", "uniform_rate", "offset", "rows"}, "confusion spec"
    )
    kind = _require(spec, "kind", "confusion spec")
    if kind == "identity":
        return np.eye(num_classes)
    if kind == "uniform_flip":
        rate = float(_require(spec, "flip_rate", "uniform_flip confusion"))
        if not (0.0 <= rate <= 1.0):
            raise ConfigError("flip_rate must lie in [0, 1]")
        m = np.full((num_classes, num_classes), rate / (num_classes - 1))
        np.fill_diagonal(m, 1.0 - rate)
        return m
    if kind == "biased_flip":
        rate = float(_require(spec, "flip_rate", "biased_flip confusion"))
        offset = int(_require(spec, "offset", "biased_flip confusion"))
        if not (0.0 <= rate <= 1.0):
            raise ConfigError("flip_rate must lie in [0, 1]")
        if offset % num_classes == 0:
            raise ConfigError("biased_flip offset must not be a multiple of num_classes")
        m = (1.0 - rate) * np.eye(num_classes)
        for c in range(num_classes):
            m[c, (c + offset) % num_classes] += rate
        return m
    if kind == "mixed_flip":
        # uniform_rate spread over wrong classes plus flip_rate toward one offset
        uniform_rate = float(_require(spec, "uniform_rate", "mixed_flip confusion"))
        rate = float(_require(spec, "flip_rate", "mixed_flip confusion"))
        offset = int(_require(spec, "offset", "mixed_flip confusion"))
        if uniform_rate < 0.0 or rate < 0.0 or uniform_rate + rate > 1.0:
            raise ConfigError("mixed_flip rates must be >= 0 and sum to at most 1")
        if offset % num_classes == 0:
            raise ConfigError("mixed_flip offset must not be a multiple of num_classes")
        m = (1.0 - uniform_rate - rate) * np.eye(num_classes)
        m += uniform_rate / (num_classes - 1) * (np.ones((num_classes, num_classes)) - np.eye(num_classes))
        for c in range(num_classes):
            m[c, (c + offset) % num_classes] += rate
        return m
    if kind == "matrix":
        return np.asarray(_require(spec, "rows", "matrix confusion"), dtype=np.float64)
    raise ConfigError(f"unknown confusion kind {kind!r}")


# -- config dataclasses ---------------------------------------------------------


@dataclass(frozen=True)
class SiteConfig:
    site_id: int
    feature_shift: float | tuple[float, ...]
    confusion: Mapping

    @staticmethod
    def from_dict(data: Mapping) -> "SiteConfig":
        _check_keys(data, {"site_id", "feature_shift", "confusion"}, "site config")
        shift = _require(data, "feature_shift", "site config")
        if isinstance(shift, (list, tuple)):
            shift = tuple(float(v) for v in shift)
        else:
            shift = float(shift)
        return SiteConfig(
            site_id=int(_require(data, "site_id", "site config")),
            feature_shift=shift,
            confusion=dict(_require(data, "confusion", "site config")),
        )

    def as_dict(self) -> dict:
        shift = (
            list(self.feature_shift)
            if isinstance(self.feature_shift, tuple)
            else self.feature_shift
        )
        return {
            "site_id": self.site_id,
            "feature_shift": shift,
            "confusion": dict(self.confusion),
        }


@dataclass(frozen=True)
class OperatorConfig:
    kind: str
    operator_id: int
    confusion: Mapping | None = None
    per_site: Mapping[str, Mapping] | None = None
    soft: bool = False
    alpha: float | None = None
    eps_rule: float | None = None
    threshold: float = 0.0

    @staticmethod
    def from_dict(data: Mapping) -> "OperatorConfig":
        _check_keys(
            data,
            {"kind", "operator_id", "confusion", "per_site", "soft", "alpha", "eps_rule", "threshold"},
            "operator config",
        )
        kind = _require(data, "kind", "operator config")
        if kind not in ("channel", "ontology_prop", "cooccurrence"):
            raise ConfigError(f"unknown operator kind {kind!r}")
        if kind in ("channel", "ontology_prop") and (
            data.get("confusion") is None and data.get("per_site") is None
        ):
            raise ConfigError(f"{kind} operator needs a confusion spec")
        if kind == "ontology_prop" and data.get("alpha") is None:
            raise ConfigError("ontology_prop operator needs alpha")
        if kind == "cooccurrence" and data.get("eps_rule") is None:
            raise ConfigError("cooccurrence operator needs eps_rule")
        return OperatorConfig(
            kind=kind,
            operator_id=int(_require(data, "operator_id", "operator config")),
            confusion=data.get("confusion"),
            per_site=data.get("per_site"),
            soft=bool(data.get("soft", False)),
            alpha=None if data.get("alpha") is None else float(data["alpha"]),
            eps_rule=None if data.get("eps_rule") is None else float(data["eps_rule"]),
            threshold=float(data.get("threshold", 0.0)),
        )

    def as_dict(self) -> dict:
        out: dict = {"kind": self.kind, "operator_id": self.operator_id}
        if self.confusion is not None:
            out["confusion"] = dict(self.confusion)
        if self.per_site is not None:
            out["per_site"] = {k: dict(v) for k, v in self.per_site.items()}
        if self.soft:
            out["soft"] = True
        if self.alpha is not None:
            out["alpha"] = self.alpha
        if self.eps_rule is not None:
            out["eps_rule"] = self.eps_rule
        if self.threshold != 0.0:
            out["threshold"] = self.threshold
        return out


@dataclass(frozen=True)
class GraphSpec:
    branching: int
    depth: int

    @staticmethod
    def from_dict(data: Mapping) -> "GraphSpec":
        _check_keys(data, {"branching", "depth"}, "graph config")
        return GraphSpec(
            branching=int(_require(data, "branching", "graph config")),
            depth=int(_require(data, "depth", "graph config")),
        )

    def as_dict(self) -> dict:
        return {"branching": self.branching, "depth": self.depth}


@dataclass(frozen=True)
class ModelSpec:
    hidden_dim: int
    activation: str = "tanh"
    init_scale: float = 1.0

    @staticmethod
    def from_dict(data: Mapping) -> "ModelSpec":
        _check_keys(data, {"hidden_dim", "activation", "init_scale"}, "model config")
        return ModelSpec(
            hidden_dim=int(_require(data, "hidden_dim", "model config")),
            activation=str(data.get("activation", "tanh")),
            init_scale=float(data.get("init_scale", 1.0)),
        )

    def as_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "activation": self.activation,
            "init_scale": self.init_scale,
        }


@dataclass(frozen=True)
class NoiseSweepParams:
    rho_list: tuple[float, ...]
    variants: tuple[str, ...] = ("full", "single_view")


@dataclass(frozen=True)
class TransferParams:
    train_sites: tuple[int, ...]
    test_sites: tuple[int, ...]
    variants: tuple[str, ...] = ("full", "no_agreement")


@dataclass(frozen=True)
class AblationParams:
    variants: tuple[str, ...] = VARIANTS
    rho: float = 0.0


@dataclass(frozen=True)
class KScalingParams:
    k_list: tuple[int, ...]
    rho: float = 0.0


def _parse_variants(raw, context: str) -> tuple[str, ...]:
    variants = tuple(str(v) for v in raw)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r} in {context}")
    if not variants:
        raise ConfigError(f"{context} needs at least one variant")
    return variants


def _parse_protocol_params(protocol: str, data: Mapping):
    if protocol == "main":
        _check_keys(data, set(), "protocol_params for main")
        return None
    if protocol == "noise_sweep":
        _check_keys(data, {"rho_list", "variants"}, "noise_sweep params")
        rho_list = tuple(float(r) for r in _require(data, "rho_list", "noise_sweep params"))
        if not rho_list or list(rho_list) != sorted(rho_list):
            raise ConfigError("rho_list must be non-empty and ascending")
        if any(not (0.0 <= r <= 1.0) for r in rho_list):
            raise ConfigError("rho values must lie in [0, 1]")
        variants = _parse_variants(
            data.get("variants", ("full", "single_view")), "noise_sweep params"
        )
        return NoiseSweepParams(rho_list=rho_list, variants=variants)
    if protocol == "transfer":
        _check_keys(data, {"train_sites", "test_sites", "variants"}, "transfer params")
        train_sites = tuple(int(s) for s in _require(data, "train_sites", "transfer params"))
        test_sites = tuple(int(s) for s in _require(data, "test_sites", "transfer params"))
        if not train_sites or not test_sites:
            raise ConfigError("transfer needs non-empty train and test site lists")
        if set(train_sites) & set(test_sites):
            raise ConfigError("transfer train and test sites must be disjoint")
        variants = _parse_variants(
            data.get("variants", ("full", "no_agreement")), "transfer params"
        )
        return TransferParams(train_sites=train_sites, test_sites=test_sites, variants=variants)
    if protocol == "ablation":
        _check_keys(data, {"variants", "rho"}, "ablation params")
        variants = _parse_variants(data.get("variants", VARIANTS), "ablation params")
        rho = float(data.get("rho", 0.0))
        if not (0.0 <= rho <= 1.0):
            raise ConfigError("rho must lie in [0, 1]")
        return AblationParams(variants=variants, rho=rho)
    if protocol == "k_scaling":
        _check_keys(data, {"k_list", "rho"}, "k_scaling params")
        k_list = tuple(int(k) for k in _require(data, "k_list", "k_scaling params"))
        if not k_list or any(k < 1 for k in k_list):
            raise ConfigError("k_list entries must be >= 1")
        rho = float(data.get("rho", 0.0))
        if not (0.0 <= rho <= 1.0):
            raise ConfigError("rho must lie in [0, 1]")
        return KScalingParams(k_list=k_list, rho=rho)
    raise ConfigError(f"unknown protocol {protocol!r}")


def _protocol_params_dict(params) -> dict:
    if params is None:
        return {}
    if isinstance(params, NoiseSweepParams):
        return {"rho_list": list(params.rho_list), "variants": list(params.variants)}
    if isinstance(params, TransferParams):
        return {
            "train_sites": list(params.train_sites),
            "test_sites": list(params.test_sites),
            "variants": list(params.variants),
        }
    if isinstance(params, AblationParams):
        return {"variants": list(params.variants), "rho": params.rho}
    return {"k_list": list(params.k_list), "rho": params.rho}


@dataclass(frozen=True)
class ExperimentConfig:
    gen: GenConfig
    sites: tuple[SiteConfig, ...]
    operators: tuple[OperatorConfig, ...]
    graph: GraphSpec
    model: ModelSpec
    loss: LossConfig
    protocol: str
    protocol_params: object
    seeds: tuple[int, ...]

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(self.sites) != self.gen.num_sites:
            raise ConfigError("sites list must match gen.num_sites")
        for i, s in enumerate(self.sites):
            if s.site_id != i:
                raise ConfigError("sites must be listed in site_id order")
        ids = [op.operator_id for op in self.operators]
        if len(set(ids)) != len(ids):
            raise ConfigError("operator_id values must be distinct")
        if not self.operators:
            raise ConfigError("need at least one operator")
        leaves = self.graph.branching**self.graph.depth
        if leaves < self.gen.num_classes:
            raise ConfigError(
                f"tree has {leaves} leaves but gen.num_classes is {self.gen.num_classes}"
            )
        if isinstance(self.protocol_params, TransferParams):
            all_sites = set(self.protocol_params.train_sites) | set(
                self.protocol_params.test_sites
            )
            if any(not (0 <= s < self.gen.num_sites) for s in all_sites):
                raise ConfigError("transfer site ids out of range")
        if isinstance(self.protocol_params, KScalingParams):
            if max(self.protocol_params.k_list) > len(self.operators):
                raise ConfigError("k_list exceeds the number of configured operators")

    @staticmethod
    def from_dict(data: Mapping) -> "ExperimentConfig":
        _check_keys(
            data,
            {"gen", "sites", "operators", "graph", "model", "loss", "protocol", "protocol_params", "seeds"},
            "experiment config",
        )
        gen = GenConfig.from_dict(dict(_require(data, "gen", "experiment config")))
        sites = tuple(SiteConfig.from_dict(s) for s in _require(data, "sites", "experiment config"))
        operators = tuple(
            OperatorConfig.from_dict(o) for o in _require(data, "operators", "experiment config")
        )
        graph = GraphSpec.from_dict(dict(_require(data, "graph", "experiment config")))
        model = ModelSpec.from_dict(dict(_require(data, "model", "experiment config")))
        loss = _loss_from_dict(dict(_require(data, "loss", "experiment config")))
        protocol = str(_require(data, "protocol", "experiment config"))
        if protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {protocol!r}")
        protocol_params = _parse_protocol_params(protocol, dict(data.get("protocol_params", {})))
        seeds = tuple(int(s) for s in _require(data, "seeds", "experiment config"))
        return ExperimentConfig(
            gen=gen,
            sites=sites,
            operators=operators,
            graph=graph,
            model=model,
            loss=loss,
            protocol=protocol,
            protocol_params=protocol_params,
            seeds=seeds,
        )

    def as_dict(self) -> dict:
        return {
            "gen": self.gen.as_dict(),
            "sites": [s.as_dict() for s in self.sites],
            "operators": [o.as_dict() for o in self.operators],
            "graph": self.graph.as_dict(),
            "model": self.model.as_dict(),
            "loss": _loss_to_dict(self.loss),
            "protocol": self.protocol,
            "protocol_params": _protocol_params_dict(self.protocol_params),
            "seeds": list(self.seeds),
        }

    def run_id(self) -> str:
        canonical = json.dumps(self.as_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _loss_from_dict(data: Mapping) -> LossConfig:
    _check_keys(
        data,
        {"lambda", "gamma", "agreement_kind", "eps_clamp", "batch_size", "learning_rate", "momentum", "epochs", "seed"},
        "loss config",
    )
    return LossConfig(
        lam=float(_require(data, "lambda", "loss config")),
        gamma=float(_require(data, "gamma", "loss config")),
        agreement_kind=str(data.get("agreement_kind", "sym_kl")),
        eps_clamp=float(data.get("eps_clamp", 1e-8)),
        batch_size=int(_require(data, "batch_size", "loss config")),
        learning_rate=float(_require(data, "learning_rate", "loss config")),
        momentum=float(data.get("momentum", 0.0)),
        epochs=int(_require(data, "epochs", "loss config")),
        seed=int(data.get("seed", 0)),
    )


def _loss_to_dict(cfg: LossConfig) -> dict:
    return {
        "lambda": cfg.lam,
        "gamma": cfg.gamma,
        "agreement_kind": cfg.agreement_kind,
        "eps_clamp": cfg.eps_clamp,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "momentum": cfg.momentum,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
    }


def load_config(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return ExperimentConfig.from_dict(data)


# -- materialization ------------------------------------------------------------


def build_sites(cfg: ExperimentConfig, gen: GenConfig) -> list[SiteSpec]:
    sites = []
    for sc in cfg.sites:
        if isinstance(sc.feature_shift, tuple):
            shift = np.asarray(sc.feature_shift, dtype=np.float64)
            if shift.shape != (gen.feature_dim,):
                raise ConfigError("feature_shift length must equal feature_dim")
        else:
            shift = np.full(gen.feature_dim, float(sc.feature_shift))
        sites.append(
            SiteSpec(
                site_id=sc.site_id,
                feature_shift=shift,
                confusion=build_confusion(sc.confusion, gen.num_classes),
            )
        )
    return sites


def _channel_from_config(
    oc: OperatorConfig, num_classes: int, sites: list[SiteSpec]
) -> ChannelParams:
    confusion = None
    per_site = None
    if oc.confusion is not None:
        if oc.confusion.get("kind") == "site":
            _check_keys(oc.confusion, {"kind"}, "site confusion spec")
            per_site = tuple((s.site_id, s.confusion) for s in sites)
        else:
            confusion = build_confusion(oc.confusion, num_classes)
    if oc.per_site is not None:
        per_site = tuple(
            (int(sid), build_confusion(spec, num_classes))
            for sid, spec in sorted(oc.per_site.items(), key=lambda kv: int(kv[0]))
        )
    return ChannelParams(confusion=confusion, per_site=per_site, soft=oc.soft)


def build_operator_specs(
    cfg: ExperimentConfig,
    prototypes: np.ndarray,
    sites: list[SiteSpec],
) -> list[OperatorSpec]:
    specs: list[OperatorSpec] = []
    c = cfg.gen.num_classes
    for oc in cfg.operators:
        if oc.kind == "channel":
            params: object = _channel_from_config(oc, c, sites)
        elif oc.kind == "ontology_prop":
            params = OntologyPropParams(
                alpha=float(oc.alpha), base=_channel_from_config(oc, c, sites)
            )
        else:
            rules = default_cooccurrence_rules(prototypes)
            if oc.threshold != 0.0:
                rules = tuple(
                    replace(r, threshold=oc.threshold) for r in rules
                )
            params = CooccurrenceParams(rules=rules, eps_rule=float(oc.eps_rule))
        specs.append(OperatorSpec(kind=oc.kind, params=params, operator_id=oc.operator_id))
    return specs


# -- cells ----------------------------------------------------------------------


@dataclass(frozen=True)
class CellResult:
    """Everything one (setting, variant, seed) job produced."""

    protocol: str
    variant: str
    seed: int
    rho: float
    num_operators: int
    metrics: dict[str, float]
    trace: tuple[LossBreakdown, ...]
    params: ModelParams
    records: tuple[PatientRecord, ...]
    graph: LabelGraph
    viewset: SupervisionViewSet
    specs: tuple[OperatorSpec, ...]
    gen_config: GenConfig
    train_count: int
    test_count: int

    def cell_id(self) -> str:
        rho = format(self.rho, "g")
        return f"{self.protocol}_{self.variant}_k{self.num_operators}_rho{rho}_seed{self.seed}"


def _variant_loss(loss: LossConfig, variant: str) -> LossConfig:
    if variant == "no_agreement":
        return replace(loss, lam=0.0)
    if variant == "no_graph":
        return replace(loss, gamma=0.0)
    if variant == "single_view":
        return replace(loss, lam=0.0, gamma=0.0)
    return loss


def _prototype_assignments(
    train_emb: np.ndarray,
    train_truth: np.ndarray,
    test_emb: np.ndarray,
    num_classes: int,
) -> np.ndarray:
    """Assign test embeddings to the nearest per-class mean of train embeddings."""
    protos = np.zeros((num_classes, train_emb.shape[1]))
    overall = train_emb.mean(axis=0)
    for c in range(num_classes):
        members = train_emb[train_truth == c]
        protos[c] = members.mean(axis=0) if members.size else overall
    diffs = test_emb[:, None, :] - protos[None, :, :]
    return np.argmin((diffs * diffs).sum(axis=-1), axis=1)


def _evaluate(
    params: ModelParams,
    graph: LabelGraph,
    x_train: np.ndarray,
    truth_train: np.ndarray,
    x_test: np.ndarray,
    truth_test: np.ndarray,
) -> dict[str, float]:
    probs = ensemble_predict_batch(params, x_test, graph.leaf_ids)
    binary_scores = probs[:, 0]
    binary_labels = (truth_test == 0).astype(np.int64)
    pred_classes = probs.argmax(axis=1)
    emb_train = encode(params, x_train)
    emb_test = encode(params, x_test)
    assignments = _prototype_assignments(
        emb_train, truth_train, emb_test, graph.num_classes
    )
    return {
        "auroc": auroc(binary_scores, binary_labels),
        "auprc": auprc(binary_scores, binary_labels),
        "macro_f1": macro_f1(pred_classes, truth_test, graph.num_classes),
        "ece": ece(binary_scores, binary_labels, ECE_BINS),
        "ari": ari(assignments.tolist(), truth_test.tolist()),
        "recall_at_10": recall_at_k(emb_test, truth_test, RECALL_K),
    }


def run_cell(
    cfg: ExperimentConfig,
    *,
    variant: str,
    seed: int,
    rho: float = 0.0,
    num_operators: int | None = None,
    train_sites: Sequence[int] | None = None,
    test_sites: Sequence[int] | None = None,
) -> CellResult:
    """One full generate/supervise/train/evaluate pipeline for one seed."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    gen = replace(cfg.gen, seed=child_seed(seed, "gen"))
    sites = build_sites(cfg, gen)
    records = generate_dataset(gen, sites)
    graph = build_tree_ontology(cfg.graph.branching, cfg.graph.depth, gen.num_classes)
    prototypes = make_prototypes(gen)
    specs = build_operator_specs(cfg, prototypes, sites)
    if num_operators is not None:
        if num_operators > len(specs):
            raise ConfigError("requested more operators than configured")
        specs = specs[:num_operators]
    if variant == "single_view":
        specs = specs[:1]

    if train_sites is not None or test_sites is not None:
        rec_sites = site_ids(records)
        train_mask = np.isin(rec_sites, list(train_sites))
        test_mask = np.isin(rec_sites, list(test_sites))
        train_records = [r for r, m in zip(records, train_mask) if m]
        test_idx = np.nonzero(test_mask)[0]
    else:
        n = len(records)
        perm = stream(child_seed(seed, "split"), "holdout").permutation(n)
        n_train = (4 * n) // 5
        train_records = [records[i] for i in perm[:n_train]]
        test_idx = perm[n_train:]

    viewset = build_views(train_records, specs, graph, child_seed(seed, "views"))
    viewset = corrupt_views(viewset, rho, child_seed(seed, "corrupt"))

    loss_cfg = replace(_variant_loss(cfg.loss, variant), seed=child_seed(seed, "train"))
    model_cfg = ModelConfig(
        feature_dim=gen.feature_dim,
        hidden_dim=cfg.model.hidden_dim,
        num_nodes=graph.num_nodes,
        num_heads=len(specs),
        activation=cfg.model.activation,
        init_scale=cfg.model.init_scale,
        seed=child_seed(seed, "model"),
    )
    params0 = init_params(model_cfg)
    lap = laplacian(graph)
    x_train = features(train_records)
    params, trace = train(params0, x_train, viewset.views, lap, loss_cfg)

    truth_train = truth_classes(train_records)
    all_truth = truth_classes(records)
    all_x = features(records)
    x_test = all_x[test_idx]
    truth_test = all_truth[test_idx]
    metrics = _evaluate(params, graph, x_train, truth_train, x_test, truth_test)
    return CellResult(
        protocol=cfg.protocol,
        variant=variant,
        seed=seed,
        rho=rho,
        num_operators=len(specs),
        metrics=metrics,
        trace=tuple(trace),
        params=params,
        records=tuple(records),
        graph=graph,
        viewset=viewset,
        specs=tuple(specs),
        gen_config=gen,
        train_count=len(train_records),
        test_count=len(test_idx),
    )


def _thread_cap() -> int:
    raw = os.environ.get("WISTERIA_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"WISTERIA_THREADS must be an integer, got {raw!r}") from exc
    return max(1, cap)


def _run_cells(cfg: ExperimentConfig, jobs: list[dict]) -> list[CellResult]:
    cap = _thread_cap()
    if cap == 1 or len(jobs) <= 1:
        return [run_cell(cfg, **job) for job in jobs]
    with ThreadPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(lambda job: run_cell(cfg, **job), jobs))


def _aggregate(cfg: ExperimentConfig, cells: list[CellResult], extra_meta: dict) -> EvalReport:
    meta = {
        "run_id": cfg.run_id(),
        "protocol": cfg.protocol,
        "task_mapping": "binary = class 0 vs rest; multiclass = all leaf classes; "
        "embedding metrics use the encoder output",
        **extra_meta,
    }
    return aggregate_metrics([c.metrics for c in cells], [c.seed for c in cells], meta)


@dataclass(frozen=True)
class ProtocolResult:
    """Cells plus aggregated per-group reports for one protocol run."""

    protocol: str
    cells: tuple[CellResult, ...]
    tables: dict[str, EvalReport]
    warnings: tuple[str, ...] = ()


def run_main(cfg: ExperimentConfig) -> ProtocolResult:
    cells = _run_cells(cfg, [dict(variant="full", seed=s) for s in cfg.seeds])
    report = _aggregate(cfg, cells, {"variant": "full", "rho": 0.0})
    return ProtocolResult(protocol="main", cells=tuple(cells), tables={"full": report})


def run_noise_sweep(cfg: ExperimentConfig) -> ProtocolResult:
    params: NoiseSweepParams = cfg.protocol_params
    if not isinstance(params, NoiseSweepParams):
        raise ConfigError("config protocol_params do not match noise_sweep")
    jobs = []
    for rho in params.rho_list:
        for variant in params.variants:
            for seed in cfg.seeds:
                jobs.append(dict(variant=variant, seed=seed, rho=rho))
    cells = _run_cells(cfg, jobs)
    tables: dict[str, EvalReport] = {}
    by_key: dict[str, list[CellResult]] = {}
    for cell in cells:
        key = f"{cell.variant}@rho={format(cell.rho, 'g')}"
        by_key.setdefault(key, []).append(cell)
    for key, group in by_key.items():
        tables[key] = _aggregate(
            cfg, group, {"variant": group[0].variant, "rho": group[0].rho}
        )
    warnings = []
    for variant in params.variants:
        means = [
            tables[f"{variant}@rho={format(r, 'g')}"].metrics["auroc"].mean
            for r in params.rho_list
        ]
        if any(b > a + 1e-12 for a, b in zip(means, means[1:])):
            warnings.append(
                f"mean AUROC not monotone non-increasing in rho for variant {variant}"
            )
    return ProtocolResult(
        protocol="noise_sweep", cells=tuple(cells), tables=tables, warnings=tuple(warnings)
    )


def run_transfer(cfg: ExperimentConfig) -> ProtocolResult:
    params: TransferParams = cfg.protocol_params
    if not isinstance(params, TransferParams):
        raise ConfigError("config protocol_params do not match transfer")
    jobs = []
    for variant in params.variants:
        for seed in cfg.seeds:
            jobs.append(
                dict(
                    variant=variant,
                    seed=seed,
                    train_sites=params.train_sites,
                    test_sites=params.test_sites,
                )
            )
    cells = _run_cells(cfg, jobs)
    tables = {}
    for variant in params.variants:
        group = [c for c in cells if c.variant == variant]
        tables[variant] = _aggregate(
            cfg,
            group,
            {
                "variant": variant,
                "train_sites": list(params.train_sites),
                "test_sites": list(params.test_sites),
                "train_count": group[0].train_count,
                "test_count": group[0].test_count,
            },
        )
    return ProtocolResult(protocol="transfer", cells=tuple(cells), tables=tables)


def run_ablation(cfg: ExperimentConfig) -> ProtocolResult:
    params: AblationParams = cfg.protocol_params
    if not isinstance(params, AblationParams):
        raise ConfigError("config protocol_params do not match ablation")
    jobs = []
    for variant in params.variants:
        for seed in cfg.seeds:
            jobs.append(dict(variant=variant, seed=seed, rho=params.rho))
    cells = _run_cells(cfg, jobs)
    tables = {}
    for variant in params.variants:
        group = [c for c in cells if c.variant == variant]
        tables[variant] = _aggregate(
            cfg, group, {"variant": variant, "rho": params.rho}
        )
    return ProtocolResult(protocol="ablation", cells=tuple(cells), tables=tables)


def run_k_scaling(cfg: ExperimentConfig) -> ProtocolResult:
    params: KScalingParams = cfg.protocol_params
    if not isinstance(params, KScalingParams):
        raise ConfigError("config protocol_params do not match k_scaling")
    jobs = []
    for k in params.k_list:
        for seed in cfg.seeds:
            jobs.append(dict(variant="full", seed=seed, rho=params.rho, num_operators=k))
    cells = _run_cells(cfg, jobs)
    tables = {}
    for k in params.k_list:
        group = [c for c in cells if c.num_operators == k]
        tables[f"K={k}"] = _aggregate(
            cfg, group, {"variant": "full", "rho": params.rho, "num_operators": k}
        )
    return ProtocolResult(protocol="k_scaling", cells=tuple(cells), tables=tables)


_PROTOCOL_RUNNERS = {
    "main": run_main,
    "noise_sweep": run_noise_sweep,
    "transfer": run_transfer,
    "ablation": run_ablation,
    "k_scaling": run_k_scaling,
}


def run_protocol(cfg: ExperimentConfig) -> ProtocolResult:
    return _PROTOCOL_RUNNERS[cfg.protocol](cfg)
