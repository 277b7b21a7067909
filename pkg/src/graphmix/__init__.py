"""graphmix: state-space sequence mixing on arbitrary graph topologies.

The mask L = (I - A)^(-1) of a parameterized adjacency accumulates influence
along every path of the graph; Y = (L ∘ C Bbar^T) V mixes node values under
it. DAG topologies admit a linear-time recurrence and a log-depth squaring
construction; general graphs use a normalized adjacency whose Neumann series
converges geometrically.
"""

from .autodiff import Tape, Var, backward_matmul_count, finite_difference_oracle
from .errors import GraphMixError
from .graphs import (
    DagPlan,
    Decomposition,
    Graph,
    build_graph,
    decompose_grid,
    decompose_line,
    graph_diameter,
    load_graph_json,
    path_sum_oracle,
    plan_dag,
    reachability,
    save_graph_json,
)
from .masks import (
    ForwardConfig,
    MaskMatrix,
    dag_recurrence,
    forward,
    mask_dense,
    mask_neumann,
    mask_squaring,
    mix_output,
    parse_algo_token,
)
from .params import (
    ProjectionWeights,
    SsmParams,
    WeightedAdjacency,
    adjacency_from_weights,
    build_adjacency_dag,
    build_adjacency_general,
    build_adjacency_undirected_line,
    compute_params,
    init_projection_store,
    load_store,
    save_store,
)

__version__ = "0.1.0"

__all__ = [
    "Tape", "Var", "backward_matmul_count", "finite_difference_oracle",
    "GraphMixError",
    "DagPlan", "Decomposition", "Graph", "build_graph", "decompose_grid",
    "decompose_line", "graph_diameter", "load_graph_json", "path_sum_oracle",
    "plan_dag", "reachability", "save_graph_json",
    "ForwardConfig", "MaskMatrix", "dag_recurrence", "forward", "mask_dense",
    "mask_neumann", "mask_squaring", "mix_output", "parse_algo_token",
    "ProjectionWeights", "SsmParams", "WeightedAdjacency",
    "adjacency_from_weights", "build_adjacency_dag", "build_adjacency_general",
    "build_adjacency_undirected_line", "compute_params",
    "init_projection_store", "load_store", "save_store",
    "__version__",
]
