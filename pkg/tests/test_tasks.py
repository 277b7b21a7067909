import numpy as np
import pytest

from graphmix import errors
from graphmix.autodiff import Tape
from graphmix.graphs import Decomposition, reachability
from graphmix.layer import BlockConfig, ModelConfig, init_model_store, model_forward
from graphmix.masks import ForwardConfig
from graphmix.tasks import (
    OptimizerConfig,
    SyntheticTask,
    _batch_loss,
    evaluate,
    make_task,
    mean_predictor_mse,
    train,
)


def small_model(task, dstate=4, blocks=1, seed=0):
    mc = ModelConfig(BlockConfig(channels=task.channels, dstate=dstate, sharing="complete",
                                 forward=ForwardConfig(regime="dag", algo="recurrence")),
                     blocks=blocks)
    store = init_model_store(np.random.default_rng(seed), mc, task.structure)
    return mc, store


class TestTaskGenerators:
    def test_path_sum_target_is_discounted_prefix(self):
        task = make_task("path-sum", size=10, channels=3, seed=0)
        x, y = task.sample(np.random.default_rng(1))
        expected = 0.0
        for i in range(10):
            expected = 0.9 * expected + x[i, 0]
            assert y[i] == pytest.approx(expected, abs=1e-12)

    def test_ancestor_count_matches_reachability(self):
        task = make_task("ancestor-count", size=12, channels=3, seed=2)
        _, y = task.sample(np.random.default_rng(3))
        reach = reachability(12, task.topology.edges)
        np.testing.assert_allclose(y, (reach.sum(axis=1) - 1) / 12.0, atol=1e-15)

    def test_grid_average_closed_neighborhood(self):
        task = make_task("grid-average", height=2, width=2, channels=3, seed=4)
        x, y = task.sample(np.random.default_rng(5))
        s = x[:, 0]
        assert y[0] == pytest.approx((s[0] + s[1] + s[2]) / 3, abs=1e-12)
        assert y[3] == pytest.approx((s[3] + s[1] + s[2]) / 3, abs=1e-12)

    def test_val_samples_pinned_and_disjoint(self):
        t1 = make_task("path-sum", size=8, channels=3, seed=7)
        t2 = make_task("path-sum", size=8, channels=3, seed=7)
        for (x1, y1), (x2, y2) in zip(t1.val_samples, t2.val_samples):
            np.testing.assert_array_equal(x1, x2)
        train_x, _ = t1.sample(np.random.default_rng(7))
        assert not any(np.array_equal(train_x, vx) for vx, _ in t1.val_samples)

    def test_structure_variants(self):
        grid = make_task("grid-average", height=3, width=3, channels=3, seed=0,
                         structure="grid")
        assert isinstance(grid.structure, Decomposition)
        assert len(grid.structure.parts) == 4
        bidir = make_task("grid-average", height=3, width=3, channels=3, seed=0,
                          structure="bidir-chain")
        assert len(bidir.structure.parts) == 2
        fwd = make_task("grid-average", height=3, width=3, channels=3, seed=0,
                        structure="fwd-chain")
        assert fwd.structure.directed

    def test_unknown_kind(self):
        with pytest.raises(errors.ConfigError):
            make_task("sorting", size=4)


class TestTrainer:
    def test_zero_learning_rate_is_exactly_flat(self):
        task = make_task("path-sum", size=12, channels=4, seed=1)
        mc, store = small_model(task)
        _, report = train(task, mc, OptimizerConfig(kind="sgd", lr=0.0),
                          steps=6, batch_size=2, seed=1, store=store)
        assert len(set(report.loss_curve)) == len(report.loss_curve)  # fresh batches
        # Re-run: parameters unchanged means identical curve.
        store2 = init_model_store(np.random.default_rng(0), mc, task.structure)
        _, report2 = train(task, mc, OptimizerConfig(kind="sgd", lr=0.0),
                           steps=6, batch_size=2, seed=1, store=store2)
        np.testing.assert_array_equal(report.loss_curve, report2.loss_curve)

    def test_zero_lr_leaves_weights_untouched(self):
        task = make_task("path-sum", size=10, channels=4, seed=2)
        mc, store = small_model(task, seed=2)
        before = {k: v.copy() for k, v in store.items()}
        train(task, mc, OptimizerConfig(kind="adam", lr=0.0), steps=4,
              batch_size=2, seed=2, store=store)
        for k in before:
            np.testing.assert_array_equal(store[k], before[k])

    def test_single_step_descent_with_small_lr(self):
        # A gradient step at some small-enough rate strictly decreases the
        # same batch's loss (line search over three rates).
        task = make_task("path-sum", size=12, channels=4, seed=3)
        mc, store = small_model(task, seed=3)
        rng = np.random.default_rng(3)
        batch = [task.sample(rng) for _ in range(2)]
        tape = Tape()
        loss0 = _batch_loss(tape, store, task, mc, batch)
        grads = tape.backward(loss0)
        descended = False
        for lr in (1e-2, 1e-3, 1e-4):
            trial = {k: v - lr * grads[k] for k, v in store.items()}
            tape2 = Tape()
            loss1 = _batch_loss(tape2, trial, task, mc, batch)
            if float(loss1.data) < float(loss0.data):
                descended = True
                break
        assert descended

    def test_determinism_same_seed_same_curve(self):
        task = make_task("path-sum", size=10, channels=4, seed=4)
        reports = []
        for _ in range(2):
            mc, store = small_model(task, seed=4)
            _, rep = train(task, mc, OptimizerConfig(kind="adam", lr=1e-3),
                           steps=5, batch_size=2, seed=4, store=store)
            reports.append(rep.loss_curve)
        np.testing.assert_array_equal(reports[0], reports[1])

    def test_divergence_detection(self):
        task = make_task("path-sum", size=10, channels=4, seed=5)
        mc, store = small_model(task, seed=5)
        with pytest.raises(errors.DivergenceError) as exc:
            train(task, mc, OptimizerConfig(kind="sgd", lr=1e9), steps=50,
                  batch_size=2, seed=5, store=store)
        assert exc.value.step > 0

    def test_sgd_and_adam_both_learn(self):
        task = make_task("path-sum", size=12, channels=4, seed=6)
        for kind, lr in (("adam", 5e-3), ("sgd", 1e-3)):
            mc, store = small_model(task, seed=6)
            _, rep = train(task, mc, OptimizerConfig(kind=kind, lr=lr),
                           steps=120, batch_size=2, seed=6, store=store)
            early = np.mean(rep.loss_curve[:10])
            late = np.mean(rep.loss_curve[-10:])
            assert late < early, f"{kind} failed to descend"

    def test_evaluate_and_baseline(self):
        task = make_task("path-sum", size=10, channels=4, seed=8)
        mc, store = small_model(task, seed=8)
        val = evaluate(store, task, mc)
        assert np.isfinite(val) and val > 0
        baseline = mean_predictor_mse(task)
        assert baseline == pytest.approx(task.target_variance(), rel=1e-12)

    def test_ancestor_count_beats_mean_predictor(self):
        task = make_task("ancestor-count", size=24, channels=6, seed=9,
                         dag_density=0.2)
        mc = ModelConfig(BlockConfig(channels=6, dstate=4, sharing="complete",
                                     forward=ForwardConfig(regime="dag", algo="recurrence")))
        store = init_model_store(np.random.default_rng(9), mc, task.structure,
                                 dt_bias=-1.0)
        _, rep = train(task, mc, OptimizerConfig(kind="adam", lr=2e-2),
                       steps=600, batch_size=4, seed=9, store=store)
        assert rep.val_mse < 0.5 * rep.baseline_mse
