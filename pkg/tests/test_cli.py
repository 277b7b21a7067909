import json
from pathlib import Path

import numpy as np
import pytest

from graphmix.cli import main
from graphmix.generators import attach_features, parse_graph_spec, random_dag
from graphmix.graphs import load_graph_json


def run(args):
    return main(args)


class TestGeneratorSpecs:
    def test_chain(self):
        src = parse_graph_spec("chain:5")
        assert src.graph.directed and src.graph.num_edges == 4

    def test_grid(self):
        src = parse_graph_spec("grid:2x3")
        assert not src.graph.directed
        assert src.height == 2 and src.width == 3
        assert src.graph.num_edges == 7

    def test_randdag_is_acyclic_and_seeded(self):
        a = parse_graph_spec("randdag:20:0.3:5").graph
        b = parse_graph_spec("randdag:20:0.3:5").graph
        assert a.edges == b.edges
        assert all(src < dst for src, dst in a.edges)

    def test_randgraph(self):
        g = parse_graph_spec("randgraph:12:0.4:1").graph
        assert not g.directed and g.num_edges > 0

    def test_file_roundtrip(self, tmp_path):
        from graphmix.graphs import save_graph_json
        g = random_dag(6, 0.5, 0)
        path = tmp_path / "g.json"
        save_graph_json(g, path)
        src = parse_graph_spec(str(path))
        assert src.kind == "file" and src.graph.edges == g.edges

    def test_bad_specs(self):
        for bad in ("chain:x", "grid:3", "randdag:4:0.5", "unknown:1", "no/such/file.json"):
            with pytest.raises(Exception):
                parse_graph_spec(bad)

    def test_attach_features_seeded(self):
        g = parse_graph_spec("chain:6").graph
        a = attach_features(g, np.random.default_rng(3), 4)
        b = attach_features(g, np.random.default_rng(3), 4)
        np.testing.assert_array_equal(a.node_features, b.node_features)


class TestExitCodes:
    def test_bad_algo_token_exits_2(self, capsys):
        assert run(["verify", "--graph", "chain:8", "--algo", "qr"]) == 2
        err = capsys.readouterr().err
        assert "error[bad-config]" in err and "dense" in err

    def test_bad_graph_spec_exits_2(self, capsys):
        assert run(["verify", "--graph", "blob:9"]) == 2
        assert "error[" in capsys.readouterr().err

    def test_cycle_input_exits_2(self, tmp_path, capsys):
        doc = {"num_nodes": 3, "directed": True, "edges": [[0, 1], [1, 2], [2, 0]]}
        path = tmp_path / "cyc.json"
        path.write_text(json.dumps(doc))
        assert run(["verify", "--graph", str(path), "--regime", "dag",
                    "--channels", "3", "--dstate", "2"]) == 2
        assert "error[cycle-detected]" in capsys.readouterr().err

    def test_verify_passes_on_chain_dag(self, tmp_path):
        out = tmp_path / "report.json"
        code = run(["verify", "--graph", "chain:12", "--regime", "dag",
                    "--channels", "3", "--dstate", "2", "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["schema_version"] == 1
        assert all(c["status"] == "pass" for c in doc["checks"])


class TestVerifyReports:
    def test_general_regime_reports_banach_row_sums(self, tmp_path, capsys):
        out = tmp_path / "r.json"
        code = run(["verify", "--graph", "randgraph:16:0.25:7", "--regime", "general",
                    "--gamma", "0.5", "--channels", "3", "--dstate", "2",
                    "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        names = [c["name"] for c in doc["checks"]]
        assert any("row abs-sums" in n for n in names)
        row_check = next(c for c in doc["checks"] if "row abs-sums" in c["name"])
        assert row_check["measured"] < 0.5

    def test_report_bodies_deterministic_modulo_env(self, tmp_path):
        outs = []
        for name in ("a.json", "b.json"):
            out = tmp_path / name
            assert run(["verify", "--graph", "randdag:10:0.3:3", "--regime",
                        "dag-normalized", "--algo", "recurrence", "--seed", "11",
                        "--channels", "3", "--dstate", "2", "--out", str(out)]) == 0
            doc = json.loads(out.read_text())
            doc.pop("environment")
            doc.pop("timings")
            outs.append(json.dumps(doc, sort_keys=True))
        assert outs[0] == outs[1]


class TestGradcheckCommand:
    def test_recurrence_gradcheck(self, capsys):
        code = run(["gradcheck", "--graph", "randdag:8:0.3:1", "--regime",
                    "dag-normalized", "--algo", "recurrence",
                    "--channels", "3", "--dstate", "2"])
        assert code == 0
        assert "[PASS] gradient" in capsys.readouterr().out

    def test_dense_gradcheck_counts_matmuls(self, capsys):
        code = run(["gradcheck", "--graph", "randdag:6:0.4:2", "--regime", "dag",
                    "--algo", "dense", "--channels", "3", "--dstate", "2"])
        assert code == 0
        out = capsys.readouterr().out
        assert "resolvent backward matmuls: measured 2" in out


class TestDecomposeCommand:
    def test_grid_3x3_file_count_and_arcs(self, tmp_path, capsys):
        out_dir = tmp_path / "parts"
        assert run(["decompose", "--graph", "grid:3x3", "--out", str(out_dir)]) == 0
        files = sorted(out_dir.glob("part*.json"))
        assert len(files) == 4
        distinct = set()
        for f in files:
            g = load_graph_json(f)
            doc = json.loads(f.read_text())
            assert len(doc["edge_map"]) == g.num_edges
            distinct.update(g.edges)
        assert len(distinct) == 24  # 12 undirected edges, both orientations
        assert "distinct oriented edges: 24" in capsys.readouterr().out

    def test_chain_decompose(self, tmp_path):
        out_dir = tmp_path / "parts"
        assert run(["decompose", "--graph", "chain:5", "--out", str(out_dir)]) == 0
        files = sorted(out_dir.glob("part*.json"))
        assert len(files) == 2
        assert all(load_graph_json(f).num_edges == 4 for f in files)

    def test_decompose_rejects_randgraph(self, capsys):
        assert run(["decompose", "--graph", "randgraph:8:0.3:0"]) == 2


class TestForwardCommand:
    def test_writes_csv_figure_report(self, tmp_path):
        out = tmp_path / "fwd.json"
        code = run(["forward", "--graph", "randdag:8:0.4:3", "--regime", "dag",
                    "--algo", "squaring", "--channels", "4", "--dstate", "3",
                    "--out", str(out)])
        assert code == 0
        assert out.exists()
        assert out.with_suffix(".csv").exists()
        assert out.with_suffix(".png").exists()
        rows = out.with_suffix(".csv").read_text().strip().splitlines()
        assert len(rows) == 9  # header + 8 nodes


class TestBenchCommand:
    def test_small_sweep_writes_rows_and_slope(self, tmp_path, capsys):
        out = tmp_path / "bench.json"
        code = run(["bench", "--sizes", "64,128,256", "--algo", "recurrence",
                    "--repeats", "3", "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        assert len(doc["timings"]["rows"]) == 3
        assert np.isfinite(doc["timings"]["loglog_slope"])
        assert out.with_suffix(".csv").exists() and out.with_suffix(".png").exists()

    def test_dia_sweep_counts_within_bound(self, tmp_path):
        out = tmp_path / "dias.json"
        code = run(["bench", "--dias", "4,16,64", "--size", "80", "--algo",
                    "squaring", "--repeats", "2", "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        for row in doc["timings"]["rows"]:
            assert row["matmul_count"] <= row["bound"]


class TestTrainCommand:
    def test_short_train_writes_report_and_weights(self, tmp_path):
        out = tmp_path / "train.json"
        weights = tmp_path / "w.json"
        code = run(["train", "--task", "path-sum", "--graph", "chain:12",
                    "--steps", "5", "--batch", "2", "--seed", "1",
                    "--channels", "6", "--dstate", "3", "--blocks", "1",
                    "--save-weights", str(weights), "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        assert len(doc["training"]["loss_curve"]) == 5
        assert out.with_suffix(".png").exists()
        from graphmix.params import load_store
        store = load_store(weights)
        assert any(k.startswith("block0") for k in store)

    def test_resume_from_checkpoint(self, tmp_path):
        weights = tmp_path / "w.json"
        run(["train", "--task", "path-sum", "--graph", "chain:10", "--steps", "3",
             "--batch", "2", "--channels", "6", "--dstate", "3", "--blocks", "1",
             "--save-weights", str(weights), "--out", str(tmp_path / "t1.json")])
        code = run(["train", "--task", "path-sum", "--graph", "chain:10",
                    "--steps", "2", "--batch", "2", "--channels", "6",
                    "--dstate", "3", "--blocks", "1",
                    "--load-weights", str(weights), "--out", str(tmp_path / "t2.json")])
        assert code == 0
