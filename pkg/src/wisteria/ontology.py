"""Label-graph construction and Laplacian smoothness machinery.

The label space is a connected graph over concept nodes; a designated
subset of degree-one leaves are the predictable classes. The unnormalized
Laplacian L = Deg - Adj gives the smoothness quadratic form
g'Lg = sum over edges (g_i - g_j)^2 used as a regularizer, with gradient
2Lg. Graphs are dense and desk-scale; sparsity is deliberately not pursued.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

GRAPH_FORMAT = "onto-v1"


@dataclass(frozen=True)
class LabelGraph:
    """Undirected connected graph over label nodes with designated class leaves."""

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    leaf_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "edges", tuple((int(i), int(j)) for i, j in self.edges)
        )
        object.__setattr__(self, "leaf_ids", tuple(int(v) for v in self.leaf_ids))
        n = self.num_nodes
        if n < 1:
            raise ConfigError("graph needs at least one node")
        seen = set()
        for i, j in self.edges:
            if i == j:
                raise ConfigError(f"self-loop at node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ConfigError(f"edge ({i},{j}) out of range for {n} nodes")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ConfigError(f"duplicate edge ({i},{j})")
            seen.add(key)
        if not self.leaf_ids:
            raise ConfigError("leaf_ids must be non-empty")
        if len(set(self.leaf_ids)) != len(self.leaf_ids):
            raise ConfigError("leaf_ids must be distinct")
        if any(not (0 <= v < n) for v in self.leaf_ids):
            raise ConfigError("leaf_ids out of range")
        if not _connected(n, self.edges):
            raise ConfigError("graph must be connected")

    @property
    def num_classes(self) -> int:
        return len(self.leaf_ids)


def _connected(num_nodes: int, edges) -> bool:
    adj = adjacency(num_nodes, edges)
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == num_nodes


def adjacency(num_nodes: int, edges) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(num_nodes)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    return adj


def bfs_distances(graph: LabelGraph, source: int) -> np.ndarray:
    if not (0 <= source < graph.num_nodes):
        raise ConfigError(f"source node {source} out of range")
    adj = adjacency(graph.num_nodes, graph.edges)
    dist = np.full(graph.num_nodes, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def build_tree_ontology(
    branching: int, depth: int, num_classes: int | None = None
) -> LabelGraph:
    """Complete branching-ary tree; leaves at maximum depth are the classes.

    ``num_classes`` selects the first that many leaves in breadth-first
    order (default: all leaves at maximum depth).
    """
    if branching < 2:
        raise ConfigError("branching must be >= 2")
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    num_leaves = branching**depth
    num_nodes = (branching ** (depth + 1) - 1) // (branching - 1)
    num_internal = num_nodes - num_leaves
    edges = []
    for parent in range(num_internal):
        for c in range(branching):
            child = branching * parent + 1 + c
            edges.append((parent, child))
    leaves = list(range(num_nodes - num_leaves, num_nodes))
    if num_classes is None:
        num_classes = num_leaves
    if not (1 <= num_classes <= num_leaves):
        raise ConfigError(
            f"num_classes {num_classes} exceeds the {num_leaves} available leaves"
        )
    return LabelGraph(num_nodes=num_nodes, edges=tuple(edges), leaf_ids=tuple(leaves[:num_classes]))


@dataclass(frozen=True)
class Laplacian:
    """Dense unnormalized Laplacian Deg - Adj of a label graph."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigError("Laplacian must be square")
        if not np.allclose(m, m.T, atol=0.0, rtol=0.0):
            raise ConfigError("Laplacian must be symmetric")
        if np.any(np.abs(m.sum(axis=1)) > 1e-12):
            raise ConfigError("Laplacian rows must sum to zero within 1e-12")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]


def laplacian(graph: LabelGraph) -> Laplacian:
    n = graph.num_nodes
    adj = np.zeros((n, n), dtype=np.float64)
    for i, j in graph.edges:
        adj[i, j] = 1.0
        adj[j, i] = 1.0
    deg = np.diag(adj.sum(axis=1))
    return Laplacian(matrix=deg - adj)


def smoothness(g: np.ndarray, lap: Laplacian) -> tuple[float, np.ndarray]:
    """Quadratic form g'Lg and its gradient 2Lg."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (lap.num_nodes,):
        raise ConfigError(
            f"vector length {g.shape} does not match Laplacian size {lap.num_nodes}"
        )
    lg = lap.matrix @ g
    return float(g @ lg), 2.0 * lg


def propagate_mass(graph: LabelGraph, source: int, alpha: float) -> np.ndarray:
    """Geometric decay alpha^dist from the source node, normalized to sum 1.

    alpha = 0 is the degenerate-smoothing convention and returns the exact
    one-hot on the source.
    """
    if not (0.0 <= alpha < 1.0):
        raise ConfigError("alpha must lie in [0, 1)")
    if not (0 <= source < graph.num_nodes):
        raise ConfigError(f"source node {source} out of range")
    out = np.zeros(graph.num_nodes, dtype=np.float64)
    if alpha == 0.0:
        out[source] = 1.0
        return out
    dist = bfs_distances(graph, source)
    weights = alpha ** dist.astype(np.float64)
    return weights / weights.sum()


def save_graph(path: str | Path, graph: LabelGraph) -> None:
    Path(path).write_text(graph_to_json(graph), encoding="utf-8")


def graph_to_json(graph: LabelGraph) -> str:
    obj = {
        "format": GRAPH_FORMAT,
        "num_nodes": graph.num_nodes,
        "edges": [[i, j] for i, j in graph.edges],
        "leaf_ids": list(graph.leaf_ids),
    }
    return json.dumps(obj, sort_keys=True) + "\n"


def graph_from_json(text: str) -> LabelGraph:
    obj = json.loads(text)
    if obj.get("format") != GRAPH_FORMAT:
        raise ConfigError(
            f"unsupported graph format {obj.get('format')!r}, expected {GRAPH_FORMAT!r}"
        )
    return LabelGraph(
        num_nodes=int(obj["num_nodes"]),
        edges=tuple((int(i), int(j)) for i, j in obj["edges"]),
        leaf_ids=tuple(int(v) for v in obj["leaf_ids"]),
    )


def load_graph(path: str | Path) -> LabelGraph:
    return graph_from_json(Path(path).read_text(encoding="utf-8"))
