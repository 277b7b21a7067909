"""Graph representation, validation, DAG planning and canonical decompositions.

Nodes are dense integers 0..T-1. Undirected graphs store each edge once with
src < dst; expansion to directed arcs happens where adjacency weights are
built. All types are immutable after construction.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CycleError,
    DuplicateEdgeError,
    FeatureShapeError,
    IndexOutOfRangeError,
    NotALineError,
    OracleSizeError,
    SelfLoopError,
)

Edge = tuple[int, int]


@dataclass(frozen=True)
class Graph:
    """A validated graph with optional node/edge features.

    `edges` keeps the caller's order (canonicalized to src < dst when
    undirected); edge-feature rows are aligned with it.
    """

    num_nodes: int
    directed: bool
    edges: tuple[Edge, ...]
    node_features: np.ndarray | None = None
    edge_features: np.ndarray | None = None

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighborhoods(self) -> list[list[int]]:
        """Aggregation neighborhoods: in-neighbors for directed graphs (keeps
        chains causal), full neighborhoods for undirected ones."""
        out: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for src, dst in self.edges:
            out[dst].append(src)
            if not self.directed:
                out[src].append(dst)
        return out

    def arcs(self) -> tuple[list[Edge], list[int]]:
        """Directed arcs plus, per arc, the index of the source edge.

        Directed graphs map 1:1; undirected edges expand to both directions.
        """
        arc_list: list[Edge] = []
        edge_map: list[int] = []
        for idx, (src, dst) in enumerate(self.edges):
            arc_list.append((src, dst))
            edge_map.append(idx)
            if not self.directed:
                arc_list.append((dst, src))
                edge_map.append(idx)
        return arc_list, edge_map


@dataclass(frozen=True)
class DagPlan:
    """Acyclicity certificate: topological order plus per-node parent lists.

    `arcs` are the directed edges (j -> i reads "j is a parent of i") and
    `in_arcs[i]` holds the arc indices entering node i, aligned with
    `parents[i]`. `diameter` is the length in edges of the longest path.
    """

    num_nodes: int
    arcs: tuple[Edge, ...]
    topo_order: tuple[int, ...]
    parents: tuple[tuple[int, ...], ...]
    in_arcs: tuple[tuple[int, ...], ...]
    diameter: int

    @property
    def num_edges(self) -> int:
        return len(self.arcs)

    def parent_counts(self) -> np.ndarray:
        return np.array([len(p) for p in self.parents], dtype=np.int64)


@dataclass(frozen=True)
class DecompositionPart:
    """One DAG of a decomposition. `edge_map[k]` is the index of the source
    undirected edge that arc k orients."""

    label: str
    plan: DagPlan
    edge_map: tuple[int, ...]


@dataclass(frozen=True)
class Decomposition:
    num_nodes: int
    num_source_edges: int
    parts: tuple[DecompositionPart, ...]


def build_graph(
    num_nodes: int,
    directed: bool,
    edges,
    node_features=None,
    edge_features=None,
) -> Graph:
    """Validate and construct a Graph.

    Rejects out-of-range indices, self loops and duplicate edges (for
    undirected graphs, (a, b) and (b, a) are the same edge). Feature row
    counts must match num_nodes / len(edges) exactly.
    """
    if num_nodes <= 0:
        raise IndexOutOfRangeError(f"num_nodes must be positive, got {num_nodes}")
    canonical: list[Edge] = []
    seen: set[Edge] = set()
    for src, dst in edges:
        src, dst = int(src), int(dst)
        if not (0 <= src < num_nodes and 0 <= dst < num_nodes):
            raise IndexOutOfRangeError(f"edge ({src}, {dst}) outside [0, {num_nodes})")
        if src == dst:
            raise SelfLoopError(f"self-loop at node {src}")
        key = (src, dst) if directed else (min(src, dst), max(src, dst))
        if key in seen:
            raise DuplicateEdgeError(f"duplicate edge ({src}, {dst})")
        seen.add(key)
        canonical.append((src, dst) if directed else key)

    nf = None
    if node_features is not None:
        nf = np.asarray(node_features, dtype=np.float64)
        if nf.ndim != 2 or nf.shape[0] != num_nodes:
            raise FeatureShapeError(
                f"node_features must be ({num_nodes}, D), got {nf.shape}"
            )
        nf.setflags(write=False)
    ef = None
    if edge_features is not None:
        ef = np.asarray(edge_features, dtype=np.float64)
        if ef.ndim != 2 or ef.shape[0] != len(canonical):
            raise FeatureShapeError(
                f"edge_features must be ({len(canonical)}, F), got {ef.shape}"
            )
        ef.setflags(write=False)

    return Graph(num_nodes, directed, tuple(canonical), nf, ef)


def _plan_from_arcs(num_nodes: int, arcs: list[Edge]) -> DagPlan:
    indegree = [0] * num_nodes
    parents: list[list[int]] = [[] for _ in range(num_nodes)]
    in_arcs: list[list[int]] = [[] for _ in range(num_nodes)]
    children: list[list[int]] = [[] for _ in range(num_nodes)]
    for k, (src, dst) in enumerate(arcs):
        indegree[dst] += 1
        parents[dst].append(src)
        in_arcs[dst].append(k)
        children[src].append(dst)

    # Kahn's algorithm; min-heap makes tie-breaking (lowest index first)
    # deterministic for golden tests.
    ready = [i for i in range(num_nodes) if indegree[i] == 0]
    heapq.heapify(ready)
    remaining = indegree[:]
    order: list[int] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for child in children[node]:
            remaining[child] -= 1
            if remaining[child] == 0:
                heapq.heappush(ready, child)

    if len(order) != num_nodes:
        stuck = [i for i in range(num_nodes) if remaining[i] > 0]
        raise CycleError(
            f"graph contains a cycle through nodes {stuck[:8]}",
            _witness_cycle(stuck, children),
        )

    # Longest path by DP over the topological order.
    longest = [0] * num_nodes
    for node in order:
        for child in children[node]:
            if longest[node] + 1 > longest[child]:
                longest[child] = longest[node] + 1
    diameter = max(longest) if longest else 0

    return DagPlan(
        num_nodes=num_nodes,
        arcs=tuple(arcs),
        topo_order=tuple(order),
        parents=tuple(tuple(p) for p in parents),
        in_arcs=tuple(tuple(a) for a in in_arcs),
        diameter=diameter,
    )


def _witness_cycle(stuck: list[int], children: list[list[int]]) -> list[int]:
    """Walk inside the stuck set until a node repeats."""
    stuck_set = set(stuck)
    node = stuck[0]
    seen: dict[int, int] = {}
    path: list[int] = []
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = next(c for c in children[node] if c in stuck_set)
    return path[seen[node]:] + [node]


def plan_dag(graph: Graph) -> DagPlan:
    """Topologically sort a directed graph; raises CycleError with a witness."""
    if not graph.directed:
        raise CycleError("plan_dag requires a directed graph", [])
    return _plan_from_arcs(graph.num_nodes, list(graph.edges))


def decompose_line(num_nodes: int) -> Decomposition:
    """Undirected chain -> forward chain plus reverse chain."""
    fwd = [(i, i + 1) for i in range(num_nodes - 1)]
    rev = [(i + 1, i) for i in range(num_nodes - 1)]
    edge_map = tuple(range(num_nodes - 1))
    parts = (
        DecompositionPart("fwd", _plan_from_arcs(num_nodes, fwd), edge_map),
        DecompositionPart("rev", _plan_from_arcs(num_nodes, rev), edge_map),
    )
    return Decomposition(num_nodes, num_nodes - 1, parts)


def grid_edges(height: int, width: int) -> list[Edge]:
    """Undirected grid edges, row-major nodes, horizontal rows first."""
    edges: list[Edge] = []
    for r in range(height):
        for c in range(width - 1):
            n = r * width + c
            edges.append((n, n + 1))
    for r in range(height - 1):
        for c in range(width):
            n = r * width + c
            edges.append((n, n + width))
    return edges


def decompose_grid(height: int, width: int) -> Decomposition:
    """Grid -> four full directed grids, one per (horizontal, vertical)
    orientation pair. Each oriented arc appears in exactly two parts."""
    num_nodes = height * width
    edges = grid_edges(height, width)
    edge_index = {e: i for i, e in enumerate(edges)}

    def part(label: str, right: bool, down: bool) -> DecompositionPart:
        arcs: list[Edge] = []
        emap: list[int] = []
        for r in range(height):
            for c in range(width - 1):
                n = r * width + c
                arcs.append((n, n + 1) if right else (n + 1, n))
                emap.append(edge_index[(n, n + 1)])
        for r in range(height - 1):
            for c in range(width):
                n = r * width + c
                arcs.append((n, n + width) if down else (n + width, n))
                emap.append(edge_index[(n, n + width)])
        return DecompositionPart(label, _plan_from_arcs(num_nodes, arcs), tuple(emap))

    parts = (
        part("right-down", True, True),
        part("left-down", False, True),
        part("right-up", True, False),
        part("left-up", False, False),
    )
    return Decomposition(num_nodes, len(edges), parts)


def is_line_graph(graph: Graph) -> bool:
    """True when the undirected graph is the chain 0-1-...-T-1."""
    if graph.directed:
        return False
    expected = {(i, i + 1) for i in range(graph.num_nodes - 1)}
    return set(graph.edges) == expected


def require_line(graph: Graph) -> None:
    if not is_line_graph(graph):
        raise NotALineError("graph is not an undirected chain 0-1-...-T-1")


def path_sum_oracle(
    num_nodes: int,
    arcs,
    weights,
    i: int,
    j: int,
    k: int,
) -> float:
    """Brute-force sum over all length-k walks from j to i.

    Matches (A^k)[i, j] under the convention A[dst, src] = weight of the
    arc src -> dst. Exponential; refuses num_nodes > 12 or k > 8.
    """
    if num_nodes > 12 or k > 8:
        raise OracleSizeError(f"oracle limited to T<=12, k<=8 (got T={num_nodes}, k={k})")
    if k == 0:
        return 1.0 if i == j else 0.0
    out: list[list[tuple[int, float]]] = [[] for _ in range(num_nodes)]
    for (src, dst), w in zip(arcs, weights):
        out[src].append((dst, float(w)))

    total = 0.0

    def walk(node: int, steps: int, product: float) -> None:
        nonlocal total
        if steps == k:
            if node == i:
                total += product
            return
        for nxt, w in out[node]:
            walk(nxt, steps + 1, product * w)

    walk(j, 0, 1.0)
    return total


def reachability(num_nodes: int, arcs) -> np.ndarray:
    """Boolean closure: reach[i, j] is True when a (possibly empty) directed
    walk j -> i exists. Mirrors the support of the resolvent mask."""
    out: list[list[int]] = [[] for _ in range(num_nodes)]
    for src, dst in arcs:
        out[src].append(dst)
    reach = np.zeros((num_nodes, num_nodes), dtype=bool)
    for j in range(num_nodes):
        seen = {j}
        queue = deque([j])
        while queue:
            node = queue.popleft()
            for nxt in out[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        for i in seen:
            reach[i, j] = True
    return reach


def graph_diameter(graph: Graph) -> int:
    """Longest shortest path over reachable pairs (BFS from every node);
    unreachable pairs are ignored, disconnected empty graphs give 0."""
    adj: list[list[int]] = [[] for _ in range(graph.num_nodes)]
    for src, dst in graph.edges:
        adj[src].append(dst)
        if not graph.directed:
            adj[dst].append(src)
    best = 0
    for start in range(graph.num_nodes):
        dist = {start: 0}
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for nxt in adj[node]:
                if nxt not in dist:
                    dist[nxt] = dist[node] + 1
                    queue.append(nxt)
        if dist:
            best = max(best, max(dist.values()))
    return best


def save_graph_json(graph: Graph, path, extra: dict | None = None) -> None:
    """Write the documented graph JSON schema; `extra` keys are appended
    verbatim (used by `decompose` for the edge map) and ignored on load."""
    doc: dict = {
        "num_nodes": graph.num_nodes,
        "directed": graph.directed,
        "edges": [[s, d] for s, d in graph.edges],
    }
    if graph.node_features is not None:
        doc["node_features"] = graph.node_features.tolist()
    if graph.edge_features is not None:
        doc["edge_features"] = graph.edge_features.tolist()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_graph_json(path) -> Graph:
    doc = json.loads(Path(path).read_text())
    return build_graph(
        doc["num_nodes"],
        doc["directed"],
        [tuple(e) for e in doc["edges"]],
        doc.get("node_features"),
        doc.get("edge_features"),
    )
