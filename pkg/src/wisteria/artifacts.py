"""File bundles produced by the pipelines, plus the markdown report renderer.

Every pipeline returns a flat mapping of relative path -> file content
(str for text, bytes for binary). The service ships bundles over HTTP and
the CLI writes them to disk, so there is exactly one producer of each byte
sequence and reruns are byte-identical by construction. Nothing here embeds
wall-clock time; run ids are hashes of the canonical config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .errors import ConfigError
from .evalmetrics import (
    EvalReport,
    MetricSummary,
    ari,
    auprc,
    auroc,
    ece,
    ensemble_predict_batch,
    macro_f1,
    recall_at_k,
)
from .experiments import (
    ECE_BINS,
    METRIC_NAMES,
    RECALL_K,
    CellResult,
    ExperimentConfig,
    VARIANT_LABELS,
    _prototype_assignments,
    build_operator_specs,
    build_sites,
    run_protocol,
)
from .model import checkpoint_from_bytes, checkpoint_to_bytes, encode, init_params, ModelConfig
from .objective import train, trace_to_csv
from .ontology import build_tree_ontology, graph_from_json, graph_to_json, laplacian
from .rng import child_seed
from .supervision import (
    build_views,
    views_from_bytes,
    views_sidecar_json,
    views_to_bytes,
)
from .synthgen import (
    dataset_from_jsonl,
    dataset_to_jsonl,
    features,
    generate_dataset,
    make_prototypes,
    truth_classes,
)

Bundle = dict[str, "str | bytes"]

SWEEP_FORMAT = "sweep-v1"
RUN_ARTIFACT_FORMAT = "runartifact-v1"


@dataclass(frozen=True)
class RunArtifact:
    """Pointers to the files one cell produced, relative to its directory."""

    config: dict
    cell: dict
    dataset_path: str
    graph_path: str
    checkpoint_path: str
    trace_path: str
    report_path: str
    views_path: str
    views_sidecar_path: str

    def as_dict(self) -> dict:
        return {
            "format": RUN_ARTIFACT_FORMAT,
            "config": self.config,
            "cell": self.cell,
            "dataset_path": self.dataset_path,
            "graph_path": self.graph_path,
            "checkpoint_path": self.checkpoint_path,
            "trace_path": self.trace_path,
            "report_path": self.report_path,
            "views_path": self.views_path,
            "views_sidecar_path": self.views_sidecar_path,
        }

    @staticmethod
    def from_dict(data: Mapping) -> "RunArtifact":
        if data.get("format") != RUN_ARTIFACT_FORMAT:
            raise ConfigError(f"unsupported run artifact format {data.get('format')!r}")
        return RunArtifact(
            config=dict(data["config"]),
            cell=dict(data["cell"]),
            dataset_path=str(data["dataset_path"]),
            graph_path=str(data["graph_path"]),
            checkpoint_path=str(data["checkpoint_path"]),
            trace_path=str(data["trace_path"]),
            report_path=str(data["report_path"]),
            views_path=str(data["views_path"]),
            views_sidecar_path=str(data["views_sidecar_path"]),
        )

    def validate(self, base_dir: str | Path) -> None:
        """Check that every referenced file exists and parses under its version."""
        base = Path(base_dir)
        from .model import load_checkpoint
        from .objective import trace_from_csv
        from .ontology import load_graph
        from .supervision import load_views
        from .synthgen import load_dataset

        load_dataset(base / self.dataset_path)
        load_graph(base / self.graph_path)
        load_checkpoint(base / self.checkpoint_path)
        trace_from_csv((base / self.trace_path).read_text(encoding="utf-8"))
        EvalReport.from_json((base / self.report_path).read_text(encoding="utf-8"))
        load_views(base / self.views_path, base / self.views_sidecar_path)


def generate_bundle(cfg: ExperimentConfig) -> Bundle:
    """Dataset, label graph, and supervision views for cfg.gen.seed."""
    gen = cfg.gen
    sites = build_sites(cfg, gen)
    records = generate_dataset(gen, sites)
    graph = build_tree_ontology(cfg.graph.branching, cfg.graph.depth, gen.num_classes)
    prototypes = make_prototypes(gen)
    specs = build_operator_specs(cfg, prototypes, sites)
    viewset = build_views(records, specs, graph, child_seed(gen.seed, "views"))
    return {
        "dataset.jsonl": dataset_to_jsonl(records, gen),
        "graph.json": graph_to_json(graph),
        "views.wstv": views_to_bytes(viewset),
        "views.json": views_sidecar_json(viewset, specs),
    }


def train_bundle(
    cfg: ExperimentConfig,
    dataset_text: str,
    views_blob: bytes,
    views_sidecar_text: str,
    graph_text: str,
) -> Bundle:
    """Train on every record in the provided files; checkpoint plus trace."""
    records, gen_echo = dataset_from_jsonl(dataset_text)
    graph = graph_from_json(graph_text)
    viewset, _specs = views_from_bytes(views_blob, views_sidecar_text)
    if viewset.num_records != len(records):
        raise ConfigError(
            f"views cover {viewset.num_records} records, dataset has {len(records)}"
        )
    if viewset.num_nodes != graph.num_nodes:
        raise ConfigError("views node dimension does not match the graph")
    model_cfg = ModelConfig(
        feature_dim=gen_echo.feature_dim,
        hidden_dim=cfg.model.hidden_dim,
        num_nodes=graph.num_nodes,
        num_heads=viewset.num_operators,
        activation=cfg.model.activation,
        init_scale=cfg.model.init_scale,
        seed=child_seed(cfg.loss.seed, "model"),
    )
    params0 = init_params(model_cfg)
    params, trace = train(
        params0, features(records), viewset.views, laplacian(graph), cfg.loss
    )
    return {
        "checkpoint.ckpt": checkpoint_to_bytes(params),
        "trace.csv": trace_to_csv(trace),
    }


def eval_bundle(checkpoint_blob: bytes, dataset_text: str, graph_text: str) -> Bundle:
    """Metrics for a checkpoint over every record in the provided dataset.

    Class prototypes for the ARI assignment are fit on these same records;
    recall@10 is included only when more than 10 records are present.
    """
    params = checkpoint_from_bytes(checkpoint_blob)
    records, gen_echo = dataset_from_jsonl(dataset_text)
    graph = graph_from_json(graph_text)
    if params.num_nodes != graph.num_nodes:
        raise ConfigError("checkpoint node dimension does not match the graph")
    if params.feature_dim != gen_echo.feature_dim:
        raise ConfigError("checkpoint feature dimension does not match the dataset")
    x = features(records)
    truth = truth_classes(records)
    probs = ensemble_predict_batch(params, x, graph.leaf_ids)
    binary_scores = probs[:, 0]
    binary_labels = (truth == 0).astype(int)
    emb = encode(params, x)
    assignments = _prototype_assignments(emb, truth, emb, graph.num_classes)
    metrics = {
        "auroc": auroc(binary_scores, binary_labels),
        "auprc": auprc(binary_scores, binary_labels),
        "macro_f1": macro_f1(probs.argmax(axis=1), truth, graph.num_classes),
        "ece": ece(binary_scores, binary_labels, ECE_BINS),
        "ari": ari(assignments.tolist(), truth.tolist()),
    }
    if len(records) > RECALL_K:
        metrics["recall_at_10"] = recall_at_k(emb, truth, RECALL_K)
    report = EvalReport(
        metrics={
            name: MetricSummary(mean=v, std=0.0, per_seed=(v,))
            for name, v in metrics.items()
        },
        metadata={
            "mode": "standalone-eval",
            "num_records": len(records),
            "gen_seed": gen_echo.seed,
        },
    )
    return {"report.json": report.to_json()}


def _report_obj(report: EvalReport) -> dict:
    return json.loads(report.to_json())


def _summary_csv(cells: tuple[CellResult, ...]) -> str:
    header = ["protocol", "variant", "num_operators", "rho", "seed", "train_count", "test_count"]
    header += list(METRIC_NAMES)
    lines = [",".join(header)]
    for c in cells:
        row = [
            c.protocol,
            c.variant,
            str(c.num_operators),
            format(c.rho, "g"),
            str(c.seed),
            str(c.train_count),
            str(c.test_count),
        ]
        row += [repr(c.metrics[m]) for m in METRIC_NAMES]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _cell_report(cfg: ExperimentConfig, cell: CellResult) -> EvalReport:
    return EvalReport(
        metrics={
            name: MetricSummary(mean=v, std=0.0, per_seed=(v,))
            for name, v in cell.metrics.items()
        },
        metadata={
            "run_id": cfg.run_id(),
            "cell": cell.cell_id(),
            "variant": cell.variant,
            "rho": cell.rho,
            "num_operators": cell.num_operators,
            "seeds": [cell.seed],
        },
    )


def sweep_bundle(cfg: ExperimentConfig) -> Bundle:
    """Run the configured protocol and lay out every artifact it produced."""
    result = run_protocol(cfg)
    files: Bundle = {}
    seen_datasets: set[int] = set()
    for cell in result.cells:
        if cell.seed not in seen_datasets:
            seen_datasets.add(cell.seed)
            files[f"datasets/seed{cell.seed}/dataset.jsonl"] = dataset_to_jsonl(
                list(cell.records), cell.gen_config
            )
            files[f"datasets/seed{cell.seed}/graph.json"] = graph_to_json(cell.graph)
        cell_dir = f"cells/{cell.cell_id()}"
        report = _cell_report(cfg, cell)
        artifact = RunArtifact(
            config=cfg.as_dict(),
            cell={
                "variant": cell.variant,
                "rho": cell.rho,
                "seed": cell.seed,
                "num_operators": cell.num_operators,
                "train_count": cell.train_count,
                "test_count": cell.test_count,
            },
            dataset_path=f"../../datasets/seed{cell.seed}/dataset.jsonl",
            graph_path=f"../../datasets/seed{cell.seed}/graph.json",
            checkpoint_path="checkpoint.ckpt",
            trace_path="trace.csv",
            report_path="report.json",
            views_path="views.wstv",
            views_sidecar_path="views.json",
        )
        files[f"{cell_dir}/checkpoint.ckpt"] = checkpoint_to_bytes(cell.params)
        files[f"{cell_dir}/trace.csv"] = trace_to_csv(cell.trace)
        files[f"{cell_dir}/report.json"] = report.to_json()
        files[f"{cell_dir}/views.wstv"] = views_to_bytes(cell.viewset)
        files[f"{cell_dir}/views.json"] = views_sidecar_json(
            cell.viewset, list(cell.specs)
        )
        files[f"{cell_dir}/artifact.json"] = (
            json.dumps(artifact.as_dict(), sort_keys=True, indent=2) + "\n"
        )
    aggregate = {
        "format": SWEEP_FORMAT,
        "protocol": result.protocol,
        "run_id": cfg.run_id(),
        "config": cfg.as_dict(),
        "warnings": list(result.warnings),
        "tables": {key: _report_obj(rep) for key, rep in result.tables.items()},
    }
    files["aggregate.json"] = json.dumps(aggregate, sort_keys=True, indent=2) + "\n"
    files["summary.csv"] = _summary_csv(result.cells)
    return files


def render_markdown(aggregate_text: str) -> str:
    """Markdown tables (variant/setting rows, metric columns, mean +/- std)."""
    try:
        obj = json.loads(aggregate_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"aggregate.json is not valid JSON: {exc}") from exc
    if obj.get("format") != SWEEP_FORMAT:
        raise ConfigError(f"unsupported aggregate format {obj.get('format')!r}")
    lines = [
        "# wisteria sweep report",
        "",
        f"protocol: `{obj['protocol']}`  ",
        f"run id: `{obj['run_id']}`",
        "",
        "## Results (mean ± std across seeds)",
        "",
    ]
    header = "| setting | " + " | ".join(METRIC_NAMES) + " |"
    rule = "|---" * (len(METRIC_NAMES) + 1) + "|"
    lines.append(header)
    lines.append(rule)
    for key in sorted(obj["tables"].keys()):
        table = obj["tables"][key]
        label = VARIANT_LABELS.get(key, key)
        row = [label]
        for metric in METRIC_NAMES:
            m = table["metrics"].get(metric)
            row.append("" if m is None else f"{m['mean']:.3f} ± {m['std']:.3f}")
        lines.append("| " + " | ".join(row) + " |")
    if obj["warnings"]:
        lines.append("")
        lines.append("## Warnings")
        lines.append("")
        for w in obj["warnings"]:
            lines.append(f"- {w}")
    lines.append("")
    return "\n".join(lines)


def report_bundle(aggregate_text: str) -> Bundle:
    return {"summary.md": render_markdown(aggregate_text)}


def write_bundle(out_dir: str | Path, bundle: Bundle) -> None:
    out = Path(out_dir)
    for rel_path, content in bundle.items():
        target = out / rel_path
        target.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            target.write_text(content, encoding="utf-8")
