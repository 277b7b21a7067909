"""Named verification checks over concrete instances.

Each measurement function returns the quantity a proposition bounds; the
CLI `verify` command and the acceptance suite aggregate them into pass/fail
lines with pinned tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg
from .autodiff import Tape, finite_difference_oracle
from .graphs import DagPlan, Graph, plan_dag, path_sum_oracle, reachability
from .masks import ForwardConfig, forward, mask_dense, mask_neumann, mask_squaring
from .params import WeightedAdjacency, adjacency_from_weights, init_projection_store


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: measured {self.measured:.3e} vs {self.tolerance:.3e}{extra}"


def bound_check(name: str, measured: float, tolerance: float, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(measured <= tolerance), float(measured), float(tolerance), detail)


# ------------------------------------------------------------- measurements


def line_closed_form_error(arc_weights: np.ndarray) -> float:
    """Directed chain: dense mask vs the closed-form products of the arc
    weights (L[i, j] = prod of a_k over j < k <= i)."""
    t = len(arc_weights) + 1
    arcs = [(i, i + 1) for i in range(t - 1)]
    plan = plan_dag(Graph(t, True, tuple(arcs)))
    adj = adjacency_from_weights(t, arcs, arc_weights, plan=plan)
    lmat = mask_dense(adj).matrix
    expected = np.zeros((t, t))
    for j in range(t):
        expected[j, j] = 1.0
        prod = 1.0
        for i in range(j + 1, t):
            prod *= arc_weights[i - 1]
            expected[i, j] = prod
    return float(np.abs(lmat - expected).max())


def power_oracle_error(num_nodes: int, arcs, weights, k_max: int) -> float:
    """Matrix powers against brute-force walk enumeration."""
    a = np.zeros((num_nodes, num_nodes))
    for (src, dst), w in zip(arcs, weights):
        a[dst, src] = w
    worst = 0.0
    for k in range(k_max + 1):
        ak = linalg.matrix_power(a, k)
        for i in range(num_nodes):
            for j in range(num_nodes):
                expected = path_sum_oracle(num_nodes, arcs, weights, i, j, k)
                worst = max(worst, abs(ak[i, j] - expected))
    return worst


def nilpotence_errors(plan: DagPlan, weights: np.ndarray) -> tuple[float, float]:
    """(max |A^(dia+1)|, max |sum_{i<=dia} A^i - (I-A)^(-1)|)."""
    adj = adjacency_from_weights(plan.num_nodes, plan.arcs, weights, plan=plan)
    a = adj.dense_array()
    vanish = float(np.abs(linalg.matrix_power(a, plan.diameter + 1)).max())
    finite_sum = mask_neumann(adj, plan.diameter).matrix
    dense = mask_dense(adj).matrix
    return vanish, float(np.abs(finite_sum - dense).max())


def cross_algorithm_error(structure, store, config_base: ForwardConfig) -> float:
    """Pairwise relative error of recurrence vs dense vs squaring outputs."""
    outs = []
    for algo in ("recurrence", "dense", "squaring"):
        cfg = ForwardConfig(regime=config_base.regime, algo=algo, k=config_base.k,
                            gamma=config_base.gamma,
                            directed_selectivity=config_base.directed_selectivity,
                            combine=config_base.combine, dense_cap=config_base.dense_cap)
        tape = Tape()
        outs.append(forward(tape, structure, store, cfg).data)
    scale = max(float(np.abs(o).max()) for o in outs) or 1.0
    worst = 0.0
    for i in range(len(outs)):
        for j in range(i + 1, len(outs)):
            worst = max(worst, float(np.abs(outs[i] - outs[j]).max()) / scale)
    return worst


def banach_measures(adj: WeightedAdjacency) -> tuple[float, float]:
    """(max row abs-sum of A, inf-norm of the dense resolvent)."""
    a = adj.dense_array()
    lmat = mask_dense(adj).matrix
    return linalg.max_row_abs_sum(a), linalg.max_row_abs_sum(lmat)


def truncation_errors(adj: WeightedAdjacency, ks) -> list[tuple[int, float]]:
    dense = mask_dense(adj).matrix
    return [(k, linalg.max_row_abs_sum(dense - mask_neumann(adj, k).matrix)) for k in ks]


def support_mismatch(adj: WeightedAdjacency, k: int) -> int:
    """Entries where the truncated mask's support disagrees with walk
    reachability (the support of the exact resolvent for positive weights)."""
    lhat = mask_neumann(adj, k).matrix
    reach = reachability(adj.num_nodes, adj.arcs)
    return int(np.sum((lhat > 0.0) != reach))


def squaring_count(plan: DagPlan, weights: np.ndarray) -> tuple[int, int]:
    """(products used by the squaring mask at k = diameter, allowed bound)."""
    from .masks import squaring_matmul_bound
    adj = adjacency_from_weights(plan.num_nodes, plan.arcs, weights, plan=plan)
    mask = mask_squaring(adj, max(plan.diameter, 1))
    if not mask.exact:
        raise AssertionError("squaring at k=diameter must be exact on a DAG")
    return mask.matmul_count, squaring_matmul_bound(plan.diameter)


def variance_bound_measure(
    plan: DagPlan,
    arc_weights: np.ndarray,
    dstate: int,
    draws: int,
    rng: np.random.Generator,
    batch: int = 20_000,
) -> tuple[float, float]:
    """Monte-Carlo for the normalized-recurrence variance bound.

    Runs h_i = (1/sqrt|p|) * sum_j (A_ij h_j - ln(A_ij) B_i v_i) with the
    product vectors B_i v_i and the readouts C_i drawn as Gaussians with
    entry variance 1/d (the scale the variance argument uses). Returns
    (max node sample variance, max node threshold 1 + 3*SE) where SE is the
    standard error of the sample variance from the fourth moment.
    """
    t = plan.num_nodes
    pcounts = np.maximum(plan.parent_counts().astype(np.float64), 1.0)
    inv_sqrt_p = 1.0 / np.sqrt(pcounts)
    inject = np.zeros(t)
    for arc, (src, dst) in enumerate(plan.arcs):
        inject[dst] += -np.log(arc_weights[arc])
    inject *= inv_sqrt_p

    sum1 = np.zeros(t)
    sum2 = np.zeros(t)
    sum4 = np.zeros(t)
    done = 0
    scale = 1.0 / np.sqrt(dstate)
    while done < draws:
        n = min(batch, draws - done)
        bv = rng.normal(0.0, scale, size=(t, n, dstate))
        cvec = rng.normal(0.0, scale, size=(t, n, dstate))
        h = np.zeros((t, n, dstate))
        for i in plan.topo_order:
            acc = inject[i] * bv[i]
            for arc in plan.in_arcs[i]:
                src = plan.arcs[arc][0]
                acc = acc + (arc_weights[arc] * inv_sqrt_p[i]) * h[src]
            h[i] = acc
        y = np.einsum("tnd,tnd->tn", cvec, h)
        sum1 += y.sum(axis=1)
        sum2 += (y ** 2).sum(axis=1)
        sum4 += (y ** 4).sum(axis=1)
        done += n

    mean = sum1 / draws
    var = sum2 / draws - mean ** 2
    m4 = sum4 / draws - 4 * mean * (sum1 / draws) * var - mean ** 4  # central approx
    se = np.sqrt(np.maximum(m4 - var ** 2, 0.0) / draws)
    slack = var - (1.0 + 3.0 * se)
    worst = int(np.argmax(slack))
    return float(var[worst]), float(1.0 + 3.0 * se[worst])


def line_constraint_measures(adj: WeightedAdjacency, psi: np.ndarray) -> tuple[float, float, float]:
    """(max pair product + sigma over pairs, max |L|, symmetrized geometric
    bound) for the undirected-line regime."""
    t = adj.num_nodes
    a = adj.dense_array()
    sigma = 0.25 / (1.0 + np.exp(-psi[:-1]))
    products = np.array([a[i, i + 1] * a[i + 1, i] for i in range(t - 1)])
    constraint = float((products + sigma).max()) if t > 1 else 0.0
    lmat = mask_dense(adj).matrix
    if not np.all(np.isfinite(lmat)):
        return constraint, float("inf"), 0.0
    # Similarity transform to the symmetric chain: same spectrum, entries
    # bounded by the l2 resolvent norm 1/(1 - 2*max_b).
    b = np.sqrt(np.maximum(products, 0.0))
    sym = np.zeros((t, t))
    for i in range(t - 1):
        sym[i, i + 1] = sym[i + 1, i] = b[i]
    lsym = linalg.inverse(np.eye(t) - sym)
    bound = 1.0 / (1.0 - 2.0 * b.max()) if t > 1 and 2.0 * b.max() < 1.0 else 1.0
    return constraint, float(np.abs(lsym).max()), bound


def gradient_check(
    structure,
    store: dict[str, np.ndarray],
    config: ForwardConfig,
    eps: float = 1e-5,
    grad_floor: float = 1e-8,
) -> tuple[float, Tape]:
    """Backward vs central finite differences on the squared-output loss.

    Returns (max relative error over coordinates with |grad| above the
    floor, the tape of the analytic run) so callers can also inspect the
    resolvent matmul counter.
    """
    def loss_value(store_):
        tape = Tape()
        y = forward(tape, structure, store_, config)
        return float(ad.sum_all(tape, ad.mul(tape, y, y)).data)

    tape = Tape()
    y = forward(tape, structure, store, config)
    loss = ad.sum_all(tape, ad.mul(tape, y, y))
    grads = tape.backward(loss)
    fd = finite_difference_oracle(loss_value, store, eps=eps)
    worst = 0.0
    for name, reference in fd.items():
        mask = np.abs(reference) > grad_floor
        if mask.any():
            rel = np.abs(grads[name][mask] - reference[mask]) / np.abs(reference[mask])
            worst = max(worst, float(rel.max()))
    return worst, tape


# --------------------------------------------------- instance construction


def random_instance_store(rng: np.random.Generator, channels: int, dstate: int,
                          heads: int = 1, edge_dim: int | None = None,
                          directed_selectivity: bool = False,
                          jitter: float = 0.3) -> dict[str, np.ndarray]:
    """Seeded weights with biases and mixing scalars jittered so gradcheck
    exercises every parameter."""
    store: dict[str, np.ndarray] = {}
    init_projection_store(store, rng, "proj", channels=channels, dstate=dstate,
                          heads=heads, edge_dim=edge_dim,
                          directed_selectivity=directed_selectivity)
    for name in store:
        store[name] = store[name] + rng.normal(0.0, jitter, size=store[name].shape)
    return store
