"""Mask construction (exact, squared, truncated) and the mixed output
Y = (L ∘ C Bbar^T) V, plus the end-to-end forward over graphs, DAG plans and
decompositions.

Four interchangeable algorithms produce the same mixing on DAGs:
`dense` inverts I - A, `squaring` multiplies (I + A^(2^m)) factors,
`neumann` sums powers directly (the slow reference), and `recurrence`
runs one topological pass without materializing the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import linalg
from .autodiff import Tape, Var
from .errors import ConfigError, NotADagError, ShapeError
from .graphs import DagPlan, Decomposition, Graph, graph_diameter, plan_dag
from .params import (
    ProjectionWeights,
    SsmParams,
    WeightedAdjacency,
    build_adjacency_dag,
    build_adjacency_general,
    build_adjacency_undirected_line,
    compute_params,
    general_bbar,
)

DENSE_CAP = 4096

REGIMES = ("general", "dag", "dag-normalized", "undirected-line")
ALGORITHMS = ("dense", "recurrence", "squaring", "neumann")


def parse_algo_token(token: str) -> tuple[str, int | None]:
    """CLI/config algorithm selector: dense | recurrence | squaring |
    neumann:<k>."""
    if token in ("dense", "recurrence", "squaring"):
        return token, None
    if token.startswith("neumann:"):
        try:
            k = int(token.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad neumann truncation in '{token}'") from None
        if k < 0:
            raise ConfigError(f"neumann truncation must be >= 0, got {k}")
        return "neumann", k
    if token == "neumann":
        return "neumann", None
    raise ConfigError(
        f"unknown algorithm '{token}'; valid tokens: dense, recurrence, squaring, neumann:<k>"
    )


@dataclass
class MaskMatrix:
    """The T x T mask plus how it was produced. `matmul_count` is the number
    of T x T products the construction spent (the squaring-cost contract)."""

    matrix: np.ndarray
    method: str
    exact: bool
    matmul_count: int = 0
    var: Var | None = None

    def validate(self, adj: WeightedAdjacency, tol: float = 1e-8) -> None:
        a = adj.dense_array()
        if np.any(self.matrix < -1e-12):
            raise ShapeError("mask has negative entries for nonnegative adjacency")
        if adj.plan is not None:
            diag = np.diagonal(self.matrix)
            if not np.allclose(diag, 1.0, atol=1e-9):
                raise ShapeError("acyclic mask diagonal must be exactly the identity term")
        if self.exact:
            resid = np.abs((np.eye(adj.num_nodes) - a) @ self.matrix - np.eye(adj.num_nodes)).max()
            if resid >= tol:
                raise ShapeError(f"exact mask residual {resid:g} above {tol:g}")


def _check_cap(num_nodes: int, cap: int) -> None:
    if num_nodes > cap:
        raise ConfigError(
            f"dense mask for T={num_nodes} exceeds the materialization cap {cap}; "
            "use the recurrence path"
        )


def mask_dense(adj: WeightedAdjacency, tape: Tape | None = None,
               cap: int = DENSE_CAP) -> MaskMatrix:
    """L = (I - A)^(-1) by LU. Singularity here signals a normalization bug
    upstream, so the linalg error is allowed to surface."""
    _check_cap(adj.num_nodes, cap)
    if tape is not None:
        lvar = ad.resolvent(tape, adj.dense(tape))
        return MaskMatrix(lvar.data, "dense-inverse", exact=True, var=lvar)
    a = adj.dense_array()
    return MaskMatrix(linalg.inverse(np.eye(adj.num_nodes) - a), "dense-inverse", exact=True)


def _squaring_exponent(k_max: int) -> int:
    if k_max < 1:
        raise ConfigError(f"squaring needs k_max >= 1, got {k_max}")
    return max(0, math.ceil(math.log2(k_max)))


def squaring_matmul_bound(diameter: int) -> int:
    """The contract asserted by benchmarks: products <= 2*ceil(log2(dia)) + 2."""
    return 2 * math.ceil(math.log2(max(diameter, 1))) + 2


def mask_squaring(adj: WeightedAdjacency, k_max: int, tape: Tape | None = None,
                  cap: int = DENSE_CAP) -> MaskMatrix:
    """Product (I + A)(I + A^2)(I + A^4)...(I + A^p) with p the smallest
    power of two >= k_max; equals sum_{i=0}^{2p-1} A^i, exact whenever the
    adjacency is nilpotent with index <= 2p (any DAG with diameter < 2p)."""
    _check_cap(adj.num_nodes, cap)
    steps = _squaring_exponent(k_max)
    p = 1 << steps
    exact = adj.plan is not None and adj.plan.diameter <= 2 * p - 1
    eye = np.eye(adj.num_nodes)
    count = 0
    if tape is not None:
        power = adj.dense(tape)
        result = ad.cadd(tape, power, eye)
        for _ in range(steps):
            power = ad.matmul(tape, power, power)
            result = ad.matmul(tape, result, ad.cadd(tape, power, eye))
            count += 2
        return MaskMatrix(result.data, f"squaring({k_max})", exact, count, var=result)
    power = adj.dense_array()
    result = eye + power
    for _ in range(steps):
        power = power @ power
        result = result @ (eye + power)
        count += 2
    return MaskMatrix(result, f"squaring({k_max})", exact, count)


def mask_neumann(adj: WeightedAdjacency, k: int, tape: Tape | None = None,
                 cap: int = DENSE_CAP) -> MaskMatrix:
    """Plain truncation sum_{i=0}^{k} A^i by Horner's rule (the reference
    path that the squaring trick is checked against)."""
    _check_cap(adj.num_nodes, cap)
    if k < 0:
        raise ConfigError(f"neumann needs k >= 0, got {k}")
    exact = adj.plan is not None and adj.plan.diameter <= k
    eye = np.eye(adj.num_nodes)
    if tape is not None:
        a = adj.dense(tape)
        result = tape.const(eye)
        for _ in range(k):
            result = ad.cadd(tape, ad.matmul(tape, a, result), eye)
        if k == 0:
            result = ad.cadd(tape, ad.cmul(tape, a, 0.0), eye)
        return MaskMatrix(result.data, f"neumann({k})", exact, k, var=result)
    a = adj.dense_array()
    result = eye.copy()
    for _ in range(k):
        result = a @ result + eye
    return MaskMatrix(result, f"neumann({k})", exact, k)


def _head_values(tape: Tape, params: SsmParams) -> list[Var]:
    heads = len(params.b)
    dim = params.v.data.shape[1]
    if heads == 1:
        return [params.v]
    if dim % heads:
        raise ShapeError(f"channels {dim} not divisible by {heads} heads")
    step = dim // heads
    return [ad.slice_cols(tape, params.v, h * step, (h + 1) * step) for h in range(heads)]


def mix_output(tape: Tape, mask: MaskMatrix, params: SsmParams,
               bbar: list[Var]) -> Var:
    """Y = (L ∘ C Bbar^T) V, looped over heads with V split into channel
    groups and the outputs concatenated."""
    if mask.var is None:
        raise ShapeError("mix_output needs a taped mask (pass the tape to the mask builder)")
    t = mask.matrix.shape[0]
    parts = []
    for ch, bh, vh in zip(params.c, bbar, _head_values(tape, params)):
        if ch.data.shape[0] != t or bh.data.shape != ch.data.shape:
            raise ShapeError(
                f"mix shapes: mask {mask.matrix.shape}, c {ch.data.shape}, bbar {bh.data.shape}"
            )
        scores = ad.mul(tape, mask.var, ad.matmul(tape, ch, ad.transpose(tape, bh)))
        parts.append(ad.matmul(tape, scores, vh))
    return parts[0] if len(parts) == 1 else ad.concat_cols(tape, parts)


def dag_recurrence(tape: Tape, plan: DagPlan, adj: WeightedAdjacency,
                   params: SsmParams, bbar: list[Var]) -> tuple[Var, list[np.ndarray]]:
    """Single topological pass: h_i = sum_{j in p(i)} a_ij h_j + bbar_i v_i,
    y_i = c_i^T h_i. Never materializes the mask; O((V + E) d) per channel.

    Returns the mixed output and the per-head hidden states (T, d, D_head).
    """
    if adj.plan is None:
        raise NotADagError(f"recurrence needs a DAG-regime adjacency, got '{adj.regime}'")
    outs: list[Var] = []
    hidden: list[np.ndarray] = []
    for ch, bh, vh in zip(params.c, bbar, _head_values(tape, params)):
        y, h = ad.dag_scan(tape, plan, adj.weights, bh, vh, ch)
        outs.append(y)
        hidden.append(h)
    y = outs[0] if len(outs) == 1 else ad.concat_cols(tape, outs)
    return y, hidden


@dataclass
class ForwardConfig:
    """Regime/algorithm selection for the end-to-end forward."""

    regime: str = "general"
    algo: str = "dense"
    k: int | None = None              # truncation depth; defaults to the diameter
    gamma: float = 0.5
    directed_selectivity: bool = False
    combine: str = "sum"              # decomposition outputs: sum | average
    dense_cap: int = DENSE_CAP

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime '{self.regime}'; valid: {', '.join(REGIMES)}")
        if self.algo not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm '{self.algo}'; valid: {', '.join(ALGORITHMS)}")
        if self.combine not in ("sum", "average"):
            raise ConfigError(f"combine must be sum|average, got '{self.combine}'")


def _graph_for_plan(plan: DagPlan) -> Graph:
    return Graph(plan.num_nodes, True, plan.arcs)


def _mask_for(adj: WeightedAdjacency, config: ForwardConfig, tape: Tape,
              default_k: int) -> MaskMatrix:
    if config.algo == "dense":
        return mask_dense(adj, tape, cap=config.dense_cap)
    k = config.k if config.k is not None else default_k
    if config.algo == "squaring":
        return mask_squaring(adj, max(k, 1), tape, cap=config.dense_cap)
    return mask_neumann(adj, k, tape, cap=config.dense_cap)


def _forward_dag(tape: Tape, plan: DagPlan, graph: Graph, weights: ProjectionWeights,
                 config: ForwardConfig, x: Var | None, tag: str) -> Var:
    params = compute_params(tape, graph, weights, x=x, tag=tag)
    adj, bbar = build_adjacency_dag(tape, plan, params,
                                    normalized=(config.regime == "dag-normalized"), tag=tag)
    if config.algo == "recurrence":
        y, _ = dag_recurrence(tape, plan, adj, params, bbar)
        return y
    mask = _mask_for(adj, config, tape, default_k=max(plan.diameter, 1))
    return mix_output(tape, mask, params, bbar)


def forward(
    tape: Tape,
    structure: Graph | DagPlan | Decomposition,
    store: dict[str, np.ndarray],
    config: ForwardConfig,
    x: Var | None = None,
    part_prefixes: list[str] | None = None,
) -> Var:
    """End-to-end mixing: projections -> adjacency -> mask or recurrence ->
    output. Decompositions run every part and sum (or average) the part
    outputs; `part_prefixes` selects the weight set per part (parameter
    sharing), defaulting to one shared set."""
    if isinstance(structure, Decomposition):
        if config.regime not in ("dag", "dag-normalized"):
            raise ConfigError("decompositions run under the dag or dag-normalized regime")
        prefixes = part_prefixes or ["proj"] * len(structure.parts)
        if len(prefixes) != len(structure.parts):
            raise ConfigError(f"{len(prefixes)} prefixes for {len(structure.parts)} parts")
        outs = []
        for idx, (part, prefix) in enumerate(zip(structure.parts, prefixes)):
            weights = ProjectionWeights.create(tape, store, prefix)
            graph = _graph_for_plan(part.plan)
            outs.append(_forward_dag(tape, part.plan, graph, weights, config, x,
                                     tag=f"part{idx}."))
        total = outs[0]
        for other in outs[1:]:
            total = ad.add(tape, total, other)
        if config.combine == "average":
            total = ad.cmul(tape, total, 1.0 / len(outs))
        return total

    prefix = (part_prefixes or ["proj"])[0]
    weights = ProjectionWeights.create(tape, store, prefix)

    if isinstance(structure, DagPlan):
        if config.regime not in ("dag", "dag-normalized"):
            raise ConfigError("a DagPlan input requires the dag or dag-normalized regime")
        return _forward_dag(tape, structure, _graph_for_plan(structure), weights, config, x, tag="")

    graph = structure
    if config.regime in ("dag", "dag-normalized"):
        if not graph.directed:
            raise NotADagError("dag regimes need a directed graph")
        return _forward_dag(tape, plan_dag(graph), graph, weights, config, x, tag="")

    if config.algo == "recurrence":
        raise ConfigError(f"the recurrence algorithm requires a dag regime, not '{config.regime}'")

    params = compute_params(tape, graph, weights, x=x, tag="")
    if config.regime == "general":
        adj = build_adjacency_general(tape, graph, params, gamma=config.gamma,
                                      directed_variant=config.directed_selectivity)
    else:
        adj = build_adjacency_undirected_line(tape, graph, params)
    mask = _mask_for(adj, config, tape, default_k=max(graph_diameter(graph), 1))
    return mix_output(tape, mask, params, general_bbar(tape, params))
