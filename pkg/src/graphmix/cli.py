"""Command-line surface: verify | bench | gradcheck | train | decompose | forward.

Exit codes: 0 ok, 1 check failure or divergence, 2 usage/config error.
Failure paths print one `error[<code>]: ...` line, never a stack dump.
The environment variable CHIMERA_THREADS caps opt-in parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, checks, linalg, report
from .autodiff import Tape
from .errors import ConfigError, DivergenceError, GraphMixError
from .generators import GraphSource, attach_features, parse_graph_spec
from .graphs import (
    Decomposition,
    Graph,
    build_graph,
    decompose_grid,
    decompose_line,
    is_line_graph,
    plan_dag,
    save_graph_json,
)
from .layer import BlockConfig, ModelConfig, init_model_store
from .masks import (
    ForwardConfig,
    forward,
    mask_dense,
    mask_neumann,
    mask_squaring,
    parse_algo_token,
    squaring_matmul_bound,
)
from .autodiff import scan_forward
from .params import adjacency_from_weights, load_store, save_store
from .tasks import OptimizerConfig, make_task, train


def thread_cap() -> int:
    value = os.environ.get("CHIMERA_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise ConfigError(f"CHIMERA_THREADS must be an integer, got '{value}'") from None


def _forward_config(args) -> ForwardConfig:
    algo, k = parse_algo_token(args.algo)
    return ForwardConfig(regime=args.regime, algo=algo,
                         k=k if k is not None else args.k,
                         gamma=args.gamma)


def _config_echo(args) -> dict:
    skip = {"func", "out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


def _resolve_structure(source: GraphSource, fc: ForwardConfig):
    """Graphs route straight through; undirected inputs under a dag regime
    run via their canonical decomposition; a chain:T source under the
    undirected-line regime drops its orientation."""
    g = source.graph
    if fc.regime in ("dag", "dag-normalized") and not g.directed:
        if source.kind == "grid":
            return decompose_grid(source.height, source.width), g
        if is_line_graph(g):
            return decompose_line(g.num_nodes), g
        raise ConfigError("dag regimes need a directed graph, a chain, or a grid")
    if fc.regime == "undirected-line" and g.directed:
        if set(g.edges) != {(i, i + 1) for i in range(g.num_nodes - 1)}:
            raise ConfigError("the undirected-line regime needs a chain graph")
        g = build_graph(g.num_nodes, False, g.edges, g.node_features, g.edge_features)
        return g, g
    return g, g


def _instance(args, jitter: float = 0.0):
    """Graph + features + seeded weights for a run config."""
    source = parse_graph_spec(args.graph)
    rng = np.random.default_rng(args.seed)
    edge_dim = None
    if source.graph.edge_features is not None:
        edge_dim = source.graph.edge_features.shape[1]
    g = attach_features(source.graph, rng, args.channels, edge_dim)
    source = GraphSource(source.spec, source.kind, g, source.height, source.width)
    store = {}
    from .params import init_projection_store
    init_projection_store(store, rng, "proj", channels=args.channels,
                          dstate=args.dstate, heads=args.heads, edge_dim=edge_dim)
    if jitter:
        for key in store:
            store[key] = store[key] + rng.normal(0.0, jitter, size=store[key].shape)
    return source, store


def _emit(args, doc: dict, check_lines: list[str]) -> None:
    for line in check_lines:
        print(line)
    if args.out:
        path = report.write_report(doc, args.out)
        print(f"report: {path}")


# ------------------------------------------------------------------- verify


def cmd_verify(args) -> int:
    fc = _forward_config(args)
    source, store = _instance(args, jitter=0.2)
    structure, graph = _resolve_structure(source, fc)
    tol = args.tol if args.tol else 1e-9
    results: list[checks.CheckResult] = []

    single_dag = fc.regime in ("dag", "dag-normalized") and isinstance(structure, Graph)
    if single_dag:
        plan = plan_dag(graph)
        rng = np.random.default_rng(args.seed + 1)
        weights = rng.uniform(0.05, 0.95, size=plan.num_edges)
        vanish, invert = checks.nilpotence_errors(plan, weights)
        results.append(checks.bound_check("nilpotence A^(dia+1) = 0", vanish, 0.0))
        results.append(checks.bound_check("finite sum equals dense inverse", invert, 1e-10))
        count, bound = checks.squaring_count(plan, weights)
        results.append(checks.bound_check("squaring matmul count", count, bound,
                                          f"dia={plan.diameter}"))
        if all(len(p) <= 1 for p in plan.parents) and plan.diameter == plan.num_nodes - 1:
            results.append(checks.bound_check(
                "chain mask closed form", checks.line_closed_form_error(weights), 1e-12))
        results.append(checks.bound_check(
            "cross-algorithm equivalence", checks.cross_algorithm_error(structure, store, fc), tol))
    elif isinstance(structure, Decomposition):
        results.append(checks.bound_check(
            "cross-algorithm equivalence", checks.cross_algorithm_error(structure, store, fc), tol))

    if fc.regime == "general":
        from .params import build_adjacency_general
        from .params import compute_params as cp
        from .params import ProjectionWeights
        tape = Tape()
        weights_view = ProjectionWeights.create(tape, store, "proj")
        params = cp(tape, graph, weights_view)
        adj = build_adjacency_general(tape, graph, params, gamma=fc.gamma)
        row_sum, resolvent_norm = checks.banach_measures(adj)
        results.append(checks.bound_check("row abs-sums below gamma", row_sum,
                                          fc.gamma - 1e-15, f"gamma={fc.gamma}"))
        results.append(checks.bound_check("resolvent norm below 1/(1-gamma)",
                                          resolvent_norm, 1.0 / (1.0 - fc.gamma) + 1e-9))
        for k, err in checks.truncation_errors(adj, range(0, 9, 2)):
            bound = fc.gamma ** (k + 1) / (1.0 - fc.gamma)
            results.append(checks.bound_check(f"truncation tail bound k={k}", err, bound + 1e-12))
        from .graphs import graph_diameter
        dia = graph_diameter(graph)
        results.append(checks.bound_check(
            f"support equality at k=dia={dia}", checks.support_mismatch(adj, dia), 0.0))

    if fc.regime == "undirected-line":
        from .params import ProjectionWeights, build_adjacency_undirected_line
        from .params import compute_params as cp
        tape = Tape()
        weights_view = ProjectionWeights.create(tape, store, "proj")
        params = cp(tape, graph, weights_view)
        adj = build_adjacency_undirected_line(tape, graph, params)
        constraint, lmax, bound = checks.line_constraint_measures(adj, params.psi.data)
        results.append(checks.bound_check("pair product + sigma below 1/4", constraint, 0.25 + 1e-12))
        results.append(checks.bound_check("symmetrized resolvent geometric bound", lmax, bound + 1e-9))

    if graph.num_nodes <= 96:
        grad_err, tape = checks.gradient_check(structure, store, fc)
        results.append(checks.bound_check("gradient vs finite differences", grad_err, 1e-5))
        if fc.algo == "dense":
            parts = len(structure.parts) if isinstance(structure, Decomposition) else 1
            results.append(checks.bound_check(
                "resolvent backward matmuls", tape.backward_matmul_count(), 2 * parts))

    doc = report.make_report("verify", _config_echo(args), results)
    _emit(args, doc, [r.line() for r in results])
    return 0 if all(r.passed for r in results) else 1


# -------------------------------------------------------------------- bench


def _chain_instance(t: int, rng: np.random.Generator, dtype, dstate=4, channels=4):
    plan = plan_dag(build_graph(t, True, [(i, i + 1) for i in range(t - 1)]))
    w = rng.uniform(0.1, 0.95, size=plan.num_edges).astype(dtype)
    bbar = rng.normal(size=(t, dstate)).astype(dtype)
    values = rng.normal(size=(t, channels)).astype(dtype)
    cmat = rng.normal(size=(t, dstate)).astype(dtype)
    return plan, w, bbar, values, cmat


def _dia_dag(t: int, dia: int, rng: np.random.Generator):
    edges = [(i, i + 1) for i in range(dia)]
    edges += [(0, i) for i in range(dia + 1, t)]
    plan = plan_dag(build_graph(t, True, edges))
    return plan, rng.uniform(0.1, 0.95, size=plan.num_edges)


def cmd_bench(args) -> int:
    algo, k = parse_algo_token(args.algo)
    dtype = np.float64 if args.dtype == "f64" else np.float32
    rng = np.random.default_rng(args.seed)
    rows: list[dict] = []
    prev = linalg.check_finite
    linalg.check_finite = False
    try:
        if args.dias:
            sizes = [int(v) for v in args.dias.split(",")]
            fixed = args.size or (max(sizes) + 32)
            for dia in sizes:
                plan, w = _dia_dag(fixed, dia, rng)
                adj = adjacency_from_weights(fixed, plan.arcs, w.astype(dtype), plan=plan)
                mask = mask_squaring(adj, max(plan.diameter, 1))
                ms = report.median_timing(lambda: mask_squaring(adj, max(plan.diameter, 1)),
                                          repeats=args.repeats)
                rows.append({"size": dia, "algo": "squaring", "wall_ms": ms,
                             "matmul_count": mask.matmul_count,
                             "bound": squaring_matmul_bound(plan.diameter)})
        else:
            sizes = [int(v) for v in args.sizes.split(",")]
            for t in sizes:
                plan, w, bbar, values, cmat = _chain_instance(t, rng, dtype)
                if algo == "recurrence":
                    fn = lambda: scan_forward(plan, w, bbar, values, cmat)
                    count = 0
                else:
                    adj = adjacency_from_weights(t, plan.arcs, w, plan=plan)
                    if algo == "dense":
                        fn = lambda: mask_dense(adj)
                        count = 0
                    elif algo == "squaring":
                        kk = k if k is not None else max(plan.diameter, 1)
                        fn = lambda: mask_squaring(adj, kk)
                        count = mask_squaring(adj, kk).matmul_count
                    else:
                        kk = k if k is not None else plan.diameter
                        fn = lambda: mask_neumann(adj, kk)
                        count = kk
                if args.parallel:
                    workers = thread_cap()
                    start = time.perf_counter()
                    with ThreadPoolExecutor(max_workers=workers) as pool:
                        list(pool.map(lambda _: fn(), range(workers)))
                    ms = (time.perf_counter() - start) * 1e3 / workers
                    rows.append({"size": t, "algo": f"{algo}-parallel", "wall_ms": ms,
                                 "matmul_count": count})
                else:
                    ms = report.median_timing(fn, repeats=args.repeats)
                    rows.append({"size": t, "algo": algo, "wall_ms": ms,
                                 "matmul_count": count})
    finally:
        linalg.check_finite = prev

    serial = [r for r in rows if not r["algo"].endswith("-parallel")]
    slope = report.slope_fit([r["size"] for r in serial], [r["wall_ms"] for r in serial]) \
        if len(serial) >= 2 else float("nan")
    out = Path(args.out) if args.out else Path("bench.json")
    csv_path = report.write_csv(rows, out.with_suffix(".csv"))
    fig_path = report.render_bench_figure(rows, out.with_suffix(".png"),
                                          title=f"{algo} ({args.dtype})")
    doc = report.make_report("bench", _config_echo(args), [],
                             timings={"rows": rows, "loglog_slope": slope})
    report.write_report(doc, out)
    for r in rows:
        print(f"size {r['size']:>8d}  {r['algo']:<18s} {r['wall_ms']:10.3f} ms"
              f"  matmuls {r['matmul_count']}")
    print(f"log-log slope: {slope:.3f}")
    print(f"rows: {csv_path}\nfigure: {fig_path}\nreport: {out}")
    return 0


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    fc = _forward_config(args)
    source, store = _instance(args, jitter=0.3)
    structure, _ = _resolve_structure(source, fc)
    tol = args.tol if args.tol else 1e-5
    err, tape = checks.gradient_check(structure, store, fc)
    results = [checks.bound_check("gradient vs finite differences", err, tol)]
    if fc.algo == "dense":
        parts = len(structure.parts) if isinstance(structure, Decomposition) else 1
        results.append(checks.bound_check("resolvent backward matmuls",
                                          tape.backward_matmul_count(), 2 * parts))
    doc = report.make_report("gradcheck", _config_echo(args), results)
    _emit(args, doc, [r.line() for r in results])
    return 0 if all(r.passed for r in results) else 1


# -------------------------------------------------------------------- train


def cmd_train(args) -> int:
    algo, k = parse_algo_token(args.algo)
    fc = ForwardConfig(regime=args.regime if args.regime != "general" else "dag",
                       algo=algo if algo != "dense" else "recurrence", k=k)
    source = parse_graph_spec(args.graph)
    task = make_task(args.task, size=source.graph.num_nodes,
                     height=source.height, width=source.width,
                     channels=args.channels, seed=args.seed,
                     structure=args.structure)
    mc = ModelConfig(BlockConfig(channels=args.channels, dstate=args.dstate,
                                 heads=args.heads, sharing=args.sharing, forward=fc),
                     blocks=args.blocks)
    store = None
    if args.load_weights:
        store = load_store(args.load_weights)
    else:
        store = init_model_store(np.random.default_rng(args.seed + 1), mc, task.structure,
                                 dt_bias=args.dt_bias)
    opt = OptimizerConfig(kind=args.optimizer, lr=args.lr)
    store, rep = train(task, mc, opt, steps=args.steps, batch_size=args.batch,
                       seed=args.seed, store=store, log_every=args.log_every)
    ratio = rep.val_mse / rep.target_variance if rep.target_variance else float("inf")
    print(f"final train loss {rep.final_train_loss:.6f}  val MSE {rep.val_mse:.6f}"
          f"  target variance {rep.target_variance:.6f}  ratio {ratio:.3f}")
    if args.save_weights:
        save_store(store, args.save_weights)
        print(f"weights: {args.save_weights}")
    out = Path(args.out) if args.out else Path("train.json")
    doc = report.make_report("train", _config_echo(args), [],
                             timings={"wall_ms": rep.wall_ms},
                             extra={"training": rep.to_dict()})
    report.write_report(doc, out)
    fig = report.render_train_figure(rep.loss_curve, out.with_suffix(".png"),
                                     title=f"{args.task} ({args.optimizer}, lr={args.lr})")
    print(f"report: {out}\nfigure: {fig}")
    return 0


# ---------------------------------------------------------------- decompose


def cmd_decompose(args) -> int:
    source = parse_graph_spec(args.graph)
    if source.kind == "grid":
        decomp = decompose_grid(source.height, source.width)
    elif is_line_graph(source.graph) or source.kind == "chain":
        decomp = decompose_line(source.graph.num_nodes)
    else:
        raise ConfigError("decompose supports chain:<T>, grid:<H>x<W>, or undirected chain files")
    out_dir = Path(args.out) if args.out else Path("decomp")
    out_dir.mkdir(parents=True, exist_ok=True)
    total_arcs = 0
    for idx, part in enumerate(decomp.parts):
        g = build_graph(decomp.num_nodes, True, part.plan.arcs)
        path = out_dir / f"part{idx}_{part.label}.json"
        save_graph_json(g, path, extra={"edge_map": list(part.edge_map),
                                        "label": part.label})
        total_arcs += part.plan.num_edges
        print(f"{path}: {part.plan.num_edges} arcs, diameter {part.plan.diameter}")
    distinct = len({arc for p in decomp.parts for arc in p.plan.arcs})
    print(f"parts: {len(decomp.parts)}  arc slots: {total_arcs}  distinct oriented edges: "
          f"{distinct}  source edges: {decomp.num_source_edges}")
    return 0


# ------------------------------------------------------------------ forward


def cmd_forward(args) -> int:
    fc = _forward_config(args)
    source, store = _instance(args)
    structure, _ = _resolve_structure(source, fc)
    tape = Tape()
    y = forward(tape, structure, store, fc)
    out = Path(args.out) if args.out else Path("forward.json")
    rows = [{"node": i, **{f"y{c}": float(v) for c, v in enumerate(row)}}
            for i, row in enumerate(y.data)]
    csv_path = report.write_csv(rows, out.with_suffix(".csv"))
    fig_path = report.render_matrix_figure(y.data, out.with_suffix(".png"),
                                           title=f"mixed output ({fc.regime}/{fc.algo})")
    doc = report.make_report("forward", _config_echo(args), [],
                             extra={"output_shape": list(y.data.shape)})
    report.write_report(doc, out)
    print(f"output {y.data.shape}: rows {csv_path}\nfigure: {fig_path}\nreport: {out}")
    return 0


# --------------------------------------------------------------------- main


def _add_common(p: argparse.ArgumentParser, **overrides) -> None:
    """Shared flags. Installed per subcommand (not via a parent parser) so
    per-command defaults never leak across subcommands."""
    d = lambda key, fallback: overrides.get(key, fallback)
    p.add_argument("--graph", default=d("graph", "chain:16"),
                   help="graph spec: chain:T | grid:HxW | randdag:T:p:seed | "
                        "randgraph:T:p:seed | path to graph JSON")
    p.add_argument("--regime", default=d("regime", "general"),
                   choices=["general", "dag", "dag-normalized", "undirected-line"])
    p.add_argument("--algo", default=d("algo", "dense"),
                   help="dense | recurrence | squaring | neumann:<k>")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--k", type=int, default=None, help="truncation depth override")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--dstate", type=int, default=d("dstate", 4), help="hidden state size d")
    p.add_argument("--channels", type=int, default=d("channels", 8), help="node channels D")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="f64", choices=["f64", "f32"])
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--out", default=None, help="report output path")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphmix",
        description="State-space mixing over graph topologies: verification, "
                    "benchmarks, gradient checks, toy training.")
    parser.add_argument("--version", action="version", version=f"graphmix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the proposition checks")
    _add_common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time algorithms over a size sweep")
    _add_common(p, algo="recurrence")
    p.add_argument("--sizes", default="1024,2048,4096,8192,16384,32768,65536")
    p.add_argument("--dias", default=None, help="diameter sweep (squaring counters)")
    p.add_argument("--size", type=int, default=None, help="fixed node count for --dias")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--parallel", action="store_true",
                   help="throughput mode with CHIMERA_THREADS workers")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient comparison")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on a synthetic task")
    _add_common(p, regime="dag", algo="recurrence", channels=16, dstate=8)
    p.add_argument("--task", default="path-sum",
                   choices=["path-sum", "ancestor-count", "grid-average"])
    p.add_argument("--structure", default="native",
                   choices=["native", "fwd-chain", "bidir-chain", "grid"])
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--sharing", default="complete",
                   choices=["none", "complete", "row-wise", "diagonal"])
    p.add_argument("--dt-bias", type=float, default=-2.0)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--save-weights", default=None)
    p.add_argument("--load-weights", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decompose", help="write canonical DAG decomposition parts")
    _add_common(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("forward", help="run one forward pass")
    _add_common(p)
    p.set_defaults(func=cmd_forward)
    return parser


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except GraphMixError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
