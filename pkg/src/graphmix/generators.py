"""Graph sources for the CLI: generator specs or JSON files.

Specs are plain strings so run configs stay greppable:
chain:<T>, grid:<H>x<W>, randdag:<T>:<p>:<seed>, randgraph:<T>:<p>:<seed>,
anything else is read as a graph JSON path. Random families live here, not
in the graph core, so library users never depend on them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graphs import Graph, build_graph, grid_edges, load_graph_json


@dataclass(frozen=True)
class GraphSource:
    spec: str
    kind: str
    graph: Graph
    height: int = 0
    width: int = 0


def random_dag(num_nodes: int, p: float, seed: int) -> Graph:
    """Erdős–Rényi on ordered pairs (j < i), acyclic by construction."""
    rng = np.random.default_rng(seed)
    edges = [(j, i) for i in range(num_nodes) for j in range(i) if rng.random() < p]
    return build_graph(num_nodes, True, edges)


def random_graph(num_nodes: int, p: float, seed: int) -> Graph:
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i in range(num_nodes) for j in range(i + 1, num_nodes)
             if rng.random() < p]
    return build_graph(num_nodes, False, edges)


def chain(num_nodes: int) -> Graph:
    return build_graph(num_nodes, True, [(i, i + 1) for i in range(num_nodes - 1)])


def undirected_chain(num_nodes: int) -> Graph:
    return build_graph(num_nodes, False, [(i, i + 1) for i in range(num_nodes - 1)])


def parse_graph_spec(spec: str) -> GraphSource:
    try:
        if spec.startswith("chain:"):
            t = int(spec.split(":", 1)[1])
            return GraphSource(spec, "chain", chain(t))
        if spec.startswith("grid:"):
            h, w = (int(v) for v in spec.split(":", 1)[1].split("x"))
            g = build_graph(h * w, False, grid_edges(h, w))
            return GraphSource(spec, "grid", g, height=h, width=w)
        if spec.startswith("randdag:"):
            t, p, seed = spec.split(":")[1:]
            return GraphSource(spec, "randdag", random_dag(int(t), float(p), int(seed)))
        if spec.startswith("randgraph:"):
            t, p, seed = spec.split(":")[1:]
            return GraphSource(spec, "randgraph", random_graph(int(t), float(p), int(seed)))
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"bad graph spec '{spec}': {exc}") from None
    if Path(spec).exists():
        return GraphSource(spec, "file", load_graph_json(spec))
    raise ConfigError(
        f"'{spec}' is neither a generator spec (chain:T, grid:HxW, randdag:T:p:seed, "
        "randgraph:T:p:seed) nor an existing file"
    )


def attach_features(graph: Graph, rng: np.random.Generator, channels: int,
                    edge_dim: int | None = None) -> Graph:
    """Standard-normal node (and optionally edge) features for generated
    graphs; file-loaded graphs keep their own."""
    nf = graph.node_features
    if nf is None:
        nf = rng.normal(size=(graph.num_nodes, channels))
    ef = graph.edge_features
    if ef is None and edge_dim is not None:
        ef = rng.normal(size=(graph.num_edges, edge_dim))
    return build_graph(graph.num_nodes, graph.directed, graph.edges, nf, ef)
