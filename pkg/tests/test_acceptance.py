"""Acceptance suite: one test per criterion, each printing a pass/fail line
with the measured value and its pinned tolerance. Run with `pytest -v
tests/test_acceptance.py` (add -s to see the lines on success)."""

import time

import numpy as np
import pytest

from graphmix import checks, linalg
from graphmix.autodiff import Tape, scan_forward
from graphmix.generators import chain, random_dag, random_graph, undirected_chain
from graphmix.graphs import (
    build_graph,
    decompose_grid,
    decompose_line,
    grid_edges,
    plan_dag,
    reachability,
)
from graphmix.layer import BlockConfig, ModelConfig, init_model_store
from graphmix.masks import (
    ForwardConfig,
    forward,
    mask_dense,
    mask_neumann,
    squaring_matmul_bound,
)
from graphmix.params import (
    ProjectionWeights,
    adjacency_from_weights,
    build_adjacency_general,
    build_adjacency_undirected_line,
    compute_params,
    init_projection_store,
)
from graphmix.report import median_timing, slope_fit
from graphmix.tasks import OptimizerConfig, make_task, train


def _line(num: int, ok: bool, text: str) -> None:
    print(f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'} {text}")


def _general_instance(t: int, p: float, seed: int, gamma: float, channels=4, dstate=3):
    g = random_graph(t, p, seed)
    rng = np.random.default_rng(seed + 1)
    g = build_graph(t, False, g.edges, rng.normal(size=(t, channels)))
    store = {}
    init_projection_store(store, rng, "proj", channels=channels, dstate=dstate)
    tape = Tape()
    params = compute_params(tape, g, ProjectionWeights.create(tape, store, "proj"))
    return g, build_adjacency_general(tape, g, params, gamma=gamma), params


def test_criterion_01_line_graph_closed_form():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(50):
        t = int(rng.integers(2, 257))
        weights = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=t - 1)
        worst = max(worst, checks.line_closed_form_error(weights))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and elapsed < 10.0
    _line(1, ok, f"closed-form error {worst:.2e} < 1e-12 over 50 chains ({elapsed:.1f}s)")
    assert worst < 1e-12
    assert elapsed < 10.0


def test_criterion_02_path_sum_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(102)
    worst = 0.0
    for trial in range(30):
        t = int(rng.integers(3, 11))
        arcs = [(i, j) for i in range(t) for j in range(t)
                if i != j and rng.random() < 0.25]
        weights = rng.uniform(0.05, 1.0, size=len(arcs))
        worst = max(worst, checks.power_oracle_error(t, arcs, weights, k_max=6))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and elapsed < 30.0
    _line(2, ok, f"walk-enumeration error {worst:.2e} < 1e-12 over 30 graphs ({elapsed:.1f}s)")
    assert worst < 1e-12
    assert elapsed < 30.0


def test_criterion_03_nilpotence():
    start = time.perf_counter()
    rng = np.random.default_rng(103)
    worst_vanish, worst_inverse = 0.0, 0.0
    for trial in range(50):
        t = int(rng.integers(4, 65))
        plan = plan_dag(random_dag(t, float(rng.uniform(0.05, 0.5)), seed=trial))
        weights = rng.uniform(0.05, 1.0, size=plan.num_edges)
        vanish, inverse_err = checks.nilpotence_errors(plan, weights)
        worst_vanish = max(worst_vanish, vanish)
        worst_inverse = max(worst_inverse, inverse_err)
    elapsed = time.perf_counter() - start
    ok = worst_vanish == 0.0 and worst_inverse < 1e-10 and elapsed < 20.0
    _line(3, ok, f"A^(dia+1) max {worst_vanish:.1e} (exact), finite-sum vs inverse "
                 f"{worst_inverse:.2e} < 1e-10 over 50 DAGs ({elapsed:.1f}s)")
    assert worst_vanish == 0.0
    assert worst_inverse < 1e-10
    assert elapsed < 20.0


def test_criterion_04_cross_algorithm_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(104)
    worst = 0.0
    for trial in range(100):
        t = int(rng.integers(4, 129))
        d = int(rng.integers(2, 17))
        channels = int(rng.integers(2, 9))
        g = random_dag(t, float(rng.uniform(0.05, min(0.5, 20.0 / t))), seed=1000 + trial)
        g = build_graph(t, True, g.edges, rng.normal(size=(t, channels)))
        store = {}
        init_projection_store(store, rng, "proj", channels=channels, dstate=d)
        regime = "dag" if trial % 2 else "dag-normalized"
        cfg = ForwardConfig(regime=regime, algo="dense")
        worst = max(worst, checks.cross_algorithm_error(g, store, cfg))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 60.0
    _line(4, ok, f"recurrence/dense/squaring pairwise rel err {worst:.2e} < 1e-9 "
                 f"over 100 instances ({elapsed:.1f}s)")
    assert worst < 1e-9
    assert elapsed < 60.0


def test_criterion_05_banach_normalization():
    start = time.perf_counter()
    rng = np.random.default_rng(105)
    gammas = (0.25, 0.5, 0.9)
    worst_margin = -np.inf   # row_sum - gamma, must stay negative
    worst_norm_excess = -np.inf
    for trial in range(200):
        gamma = gammas[trial % 3]
        t = int(rng.integers(3, 25))
        _, adj, _ = _general_instance(t, float(rng.uniform(0.1, 0.7)), 2000 + trial, gamma)
        row_sum, res_norm = checks.banach_measures(adj)
        worst_margin = max(worst_margin, row_sum - gamma)
        worst_norm_excess = max(worst_norm_excess, res_norm - (1.0 / (1.0 - gamma) + 1e-9))
    elapsed = time.perf_counter() - start
    ok = worst_margin < 0.0 and worst_norm_excess <= 0.0 and elapsed < 30.0
    _line(5, ok, f"max(row-sum - gamma) {worst_margin:.2e} < 0, resolvent-norm excess "
                 f"{worst_norm_excess:.2e} <= 0 over 200 graphs ({elapsed:.1f}s)")
    assert worst_margin < 0.0
    assert worst_norm_excess <= 0.0
    assert elapsed < 30.0


def test_criterion_06_truncation_bound_and_support():
    start = time.perf_counter()
    rng = np.random.default_rng(106)
    gamma = 0.5
    worst_excess = -np.inf
    support_mismatches = 0
    for trial in range(20):
        t = int(rng.integers(5, 11))
        g, adj, _ = _general_instance(t, 0.5, 3000 + trial, gamma)
        for k, err in checks.truncation_errors(adj, range(0, 17)):
            worst_excess = max(worst_excess, err - gamma ** (k + 1) / (1.0 - gamma))
        from graphmix.graphs import graph_diameter
        dia = graph_diameter(g)
        support_mismatches += checks.support_mismatch(adj, dia)
        # dense support agrees with reachability on these instances
        reach = reachability(t, adj.arcs)
        dense = mask_dense(adj).matrix
        assert np.abs(dense[~reach]).max(initial=0.0) < 1e-12
        assert np.abs(dense[reach]).min() > 1e-9
    elapsed = time.perf_counter() - start
    ok = worst_excess <= 1e-12 and support_mismatches == 0 and elapsed < 30.0
    _line(6, ok, f"tail-bound excess {worst_excess:.2e} <= 0, support mismatches "
                 f"{support_mismatches} at k=dia over 20 graphs ({elapsed:.1f}s)")
    assert worst_excess <= 1e-12
    assert support_mismatches == 0
    assert elapsed < 30.0


def test_criterion_07_variance_bound_monte_carlo():
    start = time.perf_counter()
    configs = [(32, 4), (24, 8), (16, 16), (32, 8), (24, 4),
               (16, 4), (32, 16), (20, 8), (28, 4), (12, 16)]
    worst_var, worst_thresh = 0.0, 1.0
    for idx, (t, d) in enumerate(configs):
        plan = plan_dag(random_dag(t, 2.0 / t, seed=100 + idx))
        rng = np.random.default_rng(900 + idx)
        # Selectivities at the documented init scale (pre-activation shift
        # -0.5); the bound's own proof needs near-init selectivities.
        dt_node = np.log1p(np.exp(rng.normal(-0.5, 1.0, size=t)))
        delta = np.array([(dt_node[s] + dt_node[dd]) / 2.0 for s, dd in plan.arcs])
        var, thresh = checks.variance_bound_measure(
            plan, np.exp(-delta), d, draws=100_000,
            rng=np.random.default_rng(500 + idx))
        if var - thresh > worst_var - worst_thresh:
            worst_var, worst_thresh = var, thresh
        assert var <= thresh, f"DAG {idx} (T={t}, d={d}): Var {var:.4f} > {thresh:.4f}"
    elapsed = time.perf_counter() - start
    ok = elapsed < 120.0
    _line(7, ok, f"max sample Var(C^T h) {worst_var:.4f} <= 1 + 3SE = {worst_thresh:.4f} "
                 f"on 10 DAGs x 1e5 draws ({elapsed:.1f}s)")
    assert elapsed < 120.0


GRADCHECK_COMBOS = [
    ("dag", "recurrence"), ("dag", "dense"), ("dag", "squaring"), ("dag", "neumann"),
    ("dag-normalized", "recurrence"), ("dag-normalized", "dense"),
    ("dag-normalized", "squaring"), ("dag-normalized", "neumann"),
    ("general", "dense"), ("general", "squaring"), ("general", "neumann"),
    ("undirected-line", "dense"), ("undirected-line", "squaring"),
    ("undirected-line", "neumann"),
]


def _gradcheck_instance(regime: str, t: int, seed: int):
    rng = np.random.default_rng(seed)
    channels, dstate = 3, 2
    if regime in ("dag", "dag-normalized"):
        g = random_dag(t, 0.45, seed=seed)
        g = build_graph(t, True, g.edges, rng.normal(size=(t, channels)))
    elif regime == "general":
        g = random_graph(t, 0.45, seed=seed)
        g = build_graph(t, False, g.edges, rng.normal(size=(t, channels)))
    else:
        g = build_graph(t, False, [(i, i + 1) for i in range(t - 1)],
                        rng.normal(size=(t, channels)))
    store = checks.random_instance_store(rng, channels, dstate)
    return g, store


def test_criterion_08_gradient_correctness():
    start = time.perf_counter()
    sizes = (4, 8, 16)
    worst = 0.0
    for regime, algo in GRADCHECK_COMBOS:
        for seed in range(20):
            t = sizes[seed % 3]
            g, store = _gradcheck_instance(regime, t, 4000 + seed)
            cfg = ForwardConfig(regime=regime, algo=algo, k=t)
            err, tape = checks.gradient_check(g, store, cfg)
            worst = max(worst, err)
            assert err < 1e-5, f"{regime}/{algo} T={t} seed={seed}: rel err {err:.2e}"
            if algo == "dense":
                assert tape.backward_matmul_count() == 2
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 180.0
    _line(8, ok, f"max rel err {worst:.2e} < 1e-5 over {len(GRADCHECK_COMBOS)} combos x "
                 f"20 seeds; dense backward = 2 matmuls ({elapsed:.1f}s)")
    assert elapsed < 180.0


def test_criterion_09_complexity_scaling():
    start = time.perf_counter()
    rng = np.random.default_rng(109)
    prev = linalg.check_finite
    linalg.check_finite = False
    try:
        sizes = [2 ** e for e in range(10, 17)]
        times = []
        for t in sizes:
            plan = plan_dag(chain(t))
            w = rng.uniform(0.1, 0.95, size=plan.num_edges)
            bbar = rng.normal(size=(t, 4))
            values = rng.normal(size=(t, 4))
            cmat = rng.normal(size=(t, 4))
            times.append(median_timing(
                lambda: scan_forward(plan, w, bbar, values, cmat), repeats=5))
        slope = slope_fit(sizes, times)
    finally:
        linalg.check_finite = prev

    count_ok = True
    for dia in (4, 8, 16, 32, 64, 128, 256):
        t = dia + 32
        edges = [(i, i + 1) for i in range(dia)] + [(0, i) for i in range(dia + 1, t)]
        plan = plan_dag(build_graph(t, True, edges))
        weights = rng.uniform(0.1, 0.9, size=plan.num_edges)
        count, bound = checks.squaring_count(plan, weights)
        count_ok = count_ok and count <= bound
        assert count <= bound, f"dia={dia}: {count} products > bound {bound}"
    elapsed = time.perf_counter() - start
    ok = 0.9 <= slope <= 1.15 and count_ok and elapsed < 180.0
    _line(9, ok, f"recurrence log-log slope {slope:.3f} in [0.9, 1.15]; squaring "
                 f"counts within 2*ceil(log2 dia)+2 up to dia=256 ({elapsed:.1f}s)")
    assert 0.9 <= slope <= 1.15, f"slope {slope:.3f} outside [0.9, 1.15]"
    assert elapsed < 180.0


def test_criterion_10_decomposition_coverage():
    start = time.perf_counter()
    line = decompose_line(64)
    arcs = {a for part in line.parts for a in part.plan.arcs}
    for i in range(63):
        assert (i, i + 1) in arcs and (i + 1, i) in arcs

    all_pairs_ok = True
    for h in range(1, 9):
        for w in range(1, 9):
            decomp = decompose_grid(h, w)
            t = decomp.num_nodes
            covered = {a for part in decomp.parts for a in part.plan.arcs}
            for a, b in grid_edges(h, w):
                assert (a, b) in covered and (b, a) in covered
            union = np.zeros((t, t), dtype=bool)
            for part in decomp.parts:
                union |= reachability(t, part.plan.arcs)
            all_pairs_ok = all_pairs_ok and bool(union.all())
            assert union.all(), f"grid {h}x{w} misses ordered pairs"
    elapsed = time.perf_counter() - start
    ok = all_pairs_ok and elapsed < 20.0
    _line(10, ok, f"line + grid edges covered; all ordered pairs reachable for "
                  f"H,W <= 8 ({elapsed:.1f}s)")
    assert elapsed < 20.0


def test_criterion_11_undirected_line_constraint():
    start = time.perf_counter()
    worst_constraint = 0.0
    worst_excess = -np.inf
    for seed in range(100):
        rng = np.random.default_rng(7000 + seed)
        t = int(rng.integers(2, 41))
        g = build_graph(t, False, [(i, i + 1) for i in range(t - 1)],
                        rng.normal(size=(t, 4)))
        store = checks.random_instance_store(rng, 4, 3)
        tape = Tape()
        params = compute_params(tape, g, ProjectionWeights.create(tape, store, "proj"))
        adj = build_adjacency_undirected_line(tape, g, params)
        constraint, lmax, bound = checks.line_constraint_measures(adj, params.psi.data)
        assert np.isfinite(lmax)
        worst_constraint = max(worst_constraint, constraint)
        if t > 1:
            worst_excess = max(worst_excess, lmax - (bound + 1e-9))
    elapsed = time.perf_counter() - start
    ok = worst_constraint <= 0.25 + 1e-12 and worst_excess <= 0.0 and elapsed < 10.0
    _line(11, ok, f"max pair product + sigma {worst_constraint:.6f} <= 1/4; symmetrized "
                  f"resolvent within geometric bound (excess {worst_excess:.2e}) "
                  f"over 100 instances ({elapsed:.1f}s)")
    assert worst_constraint <= 0.25 + 1e-12
    assert worst_excess <= 0.0
    assert elapsed < 10.0


# Golden bar recorded from the pinned baseline run (seed 3, chain:64, Adam
# lr 5e-3, 2000 steps, batch 8, two 16-channel blocks, dt bias -2): val MSE
# 0.3139 against target variance 4.079. The criterion asserts the spec bar
# (10% of variance); the golden guards against silent regressions.
GOLDEN_PATH_SUM_VAL_MSE = 0.3139


def test_criterion_12_trainability():
    start = time.perf_counter()
    task = make_task("path-sum", size=64, channels=16, seed=3)
    mc = ModelConfig(BlockConfig(channels=16, dstate=8, sharing="complete",
                                 forward=ForwardConfig(regime="dag", algo="recurrence")),
                     blocks=2)
    store = init_model_store(np.random.default_rng(4), mc, task.structure, dt_bias=-2.0)
    store, rep = train(task, mc, OptimizerConfig(kind="adam", lr=5e-3),
                       steps=2000, batch_size=8, seed=3, store=store)
    bar = 0.1 * rep.target_variance

    flat_store = init_model_store(np.random.default_rng(4), mc, task.structure, dt_bias=-2.0)
    _, flat = train(task, mc, OptimizerConfig(kind="sgd", lr=0.0),
                    steps=8, batch_size=2, seed=3, store=flat_store)
    rerun_store = init_model_store(np.random.default_rng(4), mc, task.structure, dt_bias=-2.0)
    _, flat2 = train(task, mc, OptimizerConfig(kind="sgd", lr=0.0),
                     steps=8, batch_size=2, seed=3, store=rerun_store)
    lr_zero_flat = flat.loss_curve == flat2.loss_curve

    elapsed = time.perf_counter() - start
    ok = rep.val_mse < bar and lr_zero_flat and elapsed < 300.0
    _line(12, ok, f"val MSE {rep.val_mse:.4f} < 10% of target variance {bar:.4f} "
                  f"(golden {GOLDEN_PATH_SUM_VAL_MSE}); lr=0 curve exactly flat "
                  f"({elapsed:.1f}s)")
    assert rep.val_mse < bar
    assert rep.val_mse < 1.5 * GOLDEN_PATH_SUM_VAL_MSE, "regression vs recorded baseline"
    assert lr_zero_flat
    assert elapsed < 300.0


def test_criterion_13_structure_ablation_direction():
    start = time.perf_counter()
    results: dict[tuple[str, int], float] = {}
    for structure in ("grid", "bidir-chain", "fwd-chain"):
        for seed in (0, 1, 2):
            task = make_task("grid-average", height=6, width=6, channels=8,
                             seed=seed, structure=structure)
            mc = ModelConfig(BlockConfig(channels=8, dstate=8, sharing="complete",
                                         forward=ForwardConfig(regime="dag",
                                                               algo="recurrence")),
                             blocks=1)
            store = init_model_store(np.random.default_rng(seed + 100), mc,
                                     task.structure, dt_bias=0.0)
            _, rep = train(task, mc, OptimizerConfig(kind="adam", lr=2e-2),
                           steps=2500, batch_size=8, seed=seed, store=store)
            results[(structure, seed)] = rep.val_mse

    grid = np.mean([results[("grid", s)] for s in (0, 1, 2)])
    bidir = np.mean([results[("bidir-chain", s)] for s in (0, 1, 2)])
    fwd = np.mean([results[("fwd-chain", s)] for s in (0, 1, 2)])
    elapsed = time.perf_counter() - start
    ok = grid < bidir < fwd and elapsed < 900.0
    _line(13, ok, f"mean val MSE over 3 seeds: grid {grid:.4f} < bidirectional "
                  f"{bidir:.4f} < forward-only {fwd:.4f} ({elapsed:.0f}s)")
    assert grid < bidir < fwd, f"ordering violated: {grid:.4f}, {bidir:.4f}, {fwd:.4f}"
    assert elapsed < 900.0
