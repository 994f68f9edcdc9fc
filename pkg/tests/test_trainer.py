"""Tests for the continual trainer.

Everything runs on small synthetic 2-D streams so the whole file finishes
in seconds.
"""

import numpy as np
import pytest

from core import trainer as trainer_module
from core.analysis import AccuracyMatrix
from core.datasets import build_synthetic_stream, default_synthetic_spec
from core.models import Method, SgldConfig, Split, TaskDataset, TrainConfig
from core.persistence import CheckpointRepository
from core.tensor_diff import MlpArchitecture, ParamVector, UnknownHeadError
from core.trainer import (
    AdamOptimizer, ContinualTrainer, TrainerState, TrainingDivergenceError, UnknownMethodError, ewc_fisher,
)


@pytest.fixture(scope="module")
def stream():
    return build_synthetic_stream(default_synthetic_spec(seed=5, count=120))


@pytest.fixture
def multi_head_stream():
    spec = default_synthetic_spec(seed=6, count=80)
    spec.shared_head = False
    return build_synthetic_stream(spec)


def arch_for(stream, hidden=(16,)):
    return MlpArchitecture(stream.input_dim, hidden, stream.heads(), shared_head=stream.shared_head)


def make_trainer(stream, method="BGR", **overrides):
    config = TrainConfig(method=method, lr=1e-2, epochs=2, batch_size=64, posterior_samples=2, seed=3)
    for key, value in overrides.items():
        setattr(config, key, value)
    sgld = SgldConfig(steps=5, chain_batch=16, buffer_size=64)
    return ContinualTrainer(arch_for(stream), config, sgld)


class TestAdam:
    """Optimizer arithmetic."""

    def test_first_step_is_sign_scaled(self):
        adam = AdamOptimizer(0.1, (0.0, 0.999))
        (updated,) = adam.step([np.zeros(3)], [np.array([2.0, -0.5, 0.0])])
        np.testing.assert_allclose(updated, [-0.1, 0.1, 0.0], atol=1e-7)

    def test_two_steps_match_closed_form(self):
        lr, (b1, b2), eps = 0.01, (0.9, 0.999), 1e-8
        g1, g2 = np.array([0.3, -2.0, 1e-3]), np.array([-0.1, -1.0, 5.0])
        p0 = np.array([1.0, 0.0, -0.5])
        adam = AdamOptimizer(lr, (b1, b2), eps)
        (p1,) = adam.step([p0], [g1])
        (p2,) = adam.step([p1], [g2])

        expected1 = p0 - lr * g1 / (np.abs(g1) + eps)
        m2 = b1 * (1 - b1) * g1 + (1 - b1) * g2
        v2 = b2 * (1 - b2) * g1 ** 2 + (1 - b2) * g2 ** 2
        m_hat, v_hat = m2 / (1 - b1 ** 2), v2 / (1 - b2 ** 2)
        expected2 = expected1 - lr * m_hat / (np.sqrt(v_hat) + eps)
        np.testing.assert_allclose(p1, expected1, rtol=0, atol=1e-12)
        np.testing.assert_allclose(p2, expected2, rtol=0, atol=1e-12)

    def test_moments_accumulate(self):
        adam = AdamOptimizer(0.1, (0.9, 0.999))
        params = [np.ones(2)]
        for _ in range(3):
            params = adam.step(params, [np.ones(2)])
        assert adam.t == 3
        assert np.all(params[0] < 1.0)


class TestConstruction:
    """Configuration handling."""

    def test_unknown_method(self, stream):
        with pytest.raises(UnknownMethodError):
            ContinualTrainer(arch_for(stream), TrainConfig(method="MAGIC"))

    def test_unknown_head(self, multi_head_stream):
        trainer = make_trainer(multi_head_stream)
        known = multi_head_stream.tasks[0].train
        stray = TaskDataset(9, known.X, known.Y, known.split)
        with pytest.raises(UnknownHeadError):
            trainer.train_task(trainer.init_state(), stray)


class TestBayesianTraining:
    """VCL and BGR."""

    def test_previous_posterior_is_untouched(self, stream):
        trainer = make_trainer(stream)
        state = trainer.init_state()
        trainer.train_task(state, stream.tasks[0].train)
        anchor = state.posterior
        snapshot = anchor.copy()
        trainer.train_task(state, stream.tasks[1].train)
        np.testing.assert_array_equal(anchor.mu.values, snapshot.mu.values)
        np.testing.assert_array_equal(anchor.rho.values, snapshot.rho.values)
        assert state.previous_posterior is state.posterior

    def test_inherited_kl_starts_at_zero(self, stream):
        trainer = make_trainer(stream, method="VCL")
        state = trainer.init_state()
        trainer.train_task(state, stream.tasks[0].train)
        first_of_task_two = len(state.history)
        trainer.train_task(state, stream.tasks[1].train)
        record = state.history[first_of_task_two]
        assert record.task == 2 and record.step == 0
        assert record.kl_inherited == 0.0
        assert state.history[-1].kl > 0.0

    def test_gamma_zero_reproduces_vcl(self, stream):
        runs = []
        for method in ("VCL", "BGR"):
            trainer = make_trainer(stream, method=method, gamma=0.0)
            state = trainer.init_state()
            trainer.train_task(state, stream.tasks[0].train)
            runs.append(state.posterior)
        np.testing.assert_array_equal(runs[0].mu.values, runs[1].mu.values)
        np.testing.assert_array_equal(runs[0].rho.values, runs[1].rho.values)

    def test_bgr_fills_the_replay_buffer(self, stream):
        trainer = make_trainer(stream)
        state = trainer.init_state()
        trainer.train_task(state, stream.tasks[0].train)
        assert len(state.buffer) > 0

    def test_buffer_reset_per_task(self, stream):
        trainer = make_trainer(stream)
        trainer.sgld.reset_buffer_per_task = True
        trainer.sgld.buffer_size = 1000
        state = trainer.init_state()
        trainer.train_task(state, stream.tasks[0].train)
        after_first = len(state.buffer)
        trainer.train_task(state, stream.tasks[1].train)
        assert len(state.buffer) == after_first

    def test_mc_evaluation_is_deterministic(self, stream):
        trainer = make_trainer(stream, method="VCL", mc_eval_samples=3)
        state = trainer.init_state()
        trainer.train_task(state, stream.tasks[0].train)
        test = stream.tasks[0].test
        assert trainer.evaluate(state, test) == trainer.evaluate(state, test)


class TestMultiHead:
    """Per-task heads."""

    def test_completed_heads_are_frozen(self, multi_head_stream):
        trainer = make_trainer(multi_head_stream, method="SGD")
        state = trainer.init_state()
        trainer.train_task(state, multi_head_stream.tasks[0].train)
        head_one = trainer.arch.layout.head_mask(1)
        before = state.params.values[head_one].copy()
        trainer.train_task(state, multi_head_stream.tasks[1].train)
        np.testing.assert_array_equal(state.params.values[head_one], before)

    def test_unused_head_keeps_the_prior_mean(self, multi_head_stream):
        trainer = make_trainer(multi_head_stream, method="VCL", epochs=1)
        state = trainer.init_state()
        trainer.train_task(state, multi_head_stream.tasks[0].train)
        head_two = trainer.arch.layout.head_mask(2)
        np.testing.assert_array_equal(state.posterior.mu.values[head_two], state.prior.mu.values[head_two])


class TestPointMethods:
    """SGD, EWC, GEN, GEN_L2 and ALL_DATA."""

    def test_sgd_learns_a_task(self, stream):
        trainer = make_trainer(stream, method="SGD", epochs=40, batch_size=32)
        state = trainer.init_state()
        trainer.train_task(state, stream.tasks[0].train)
        assert trainer.evaluate(state, stream.tasks[0].test) >= 0.95

    def test_ewc_fisher_matches_per_example_loop(self, stream):
        trainer = make_trainer(stream, method="EWC", fisher_sample_cap=30)
        state = trainer.init_state()
        trainer.train_task(state, stream.tasks[0].train)
        fisher = state.fisher.values.values
        assert np.all(fisher >= 0.0)

        from core.ebm import EnergyModel, nll_grad
        data = stream.tasks[0].train
        anchor = state.ewc_anchors[0].theta_star
        model = EnergyModel(anchor, trainer.arch, 1)
        expected = np.mean([nll_grad(model, data.X[i:i + 1], data.Y[i:i + 1]).values ** 2 for i in range(30)],
                           axis=0)
        np.testing.assert_allclose(fisher, expected, rtol=1e-12, atol=1e-15)

    def test_ewc_fisher_requires_data(self, stream):
        arch = arch_for(stream)
        empty = stream.tasks[0].train
        sliced = type(empty)(1, empty.X[:0], empty.Y[:0], empty.split)
        with pytest.raises(ValueError):
            ewc_fisher(make_trainer(stream).init_state().prior.mu, arch, sliced, 10)

    @pytest.mark.parametrize("method", ["GEN", "GEN_L2", "EWC"])
    def test_regularized_methods_run(self, stream, method):
        trainer = make_trainer(stream, method=method)
        matrix, artifacts = trainer.run_sequence(stream)
        assert matrix.is_row_complete(2)
        assert artifacts.state.trained_tasks == [1, 2]

    def test_l2_anchor_skips_the_new_head(self, multi_head_stream):
        trainer = make_trainer(multi_head_stream, method="GEN_L2", gamma=0.0, l2_lambda=1e6, epochs=1)
        state = trainer.init_state()
        trainer.train_task(state, multi_head_stream.tasks[0].train)
        first_of_task_two = len(state.history)
        trainer.train_task(state, multi_head_stream.tasks[1].train)
        record = state.history[first_of_task_two]
        assert record.task == 2 and record.step == 0
        assert record.loss < 5.0

    def test_all_data_sees_every_task(self, stream):
        trainer = make_trainer(stream, method="ALL_DATA", epochs=60, batch_size=32)
        matrix, _ = trainer.run_sequence(stream)
        assert matrix.get(2, 1) >= 0.85 and matrix.get(2, 2) >= 0.85

    def test_divergence_is_reported(self, stream, monkeypatch):
        trainer = make_trainer(stream, method="SGD")

        def poisoned(model, batch):
            return float("nan"), model.params.with_values(np.zeros_like(model.params.values))

        monkeypatch.setattr(trainer_module, "nll_loss_and_grad", poisoned)
        with pytest.raises(TrainingDivergenceError, match="task 1"):
            trainer.train_task(trainer.init_state(), stream.tasks[0].train)


class TestSequence:
    """run_sequence bookkeeping and checkpoints."""

    def test_validation_accuracy_per_task(self, stream):
        trainer = make_trainer(stream, method="SGD")
        _, artifacts = trainer.run_sequence(stream)
        assert set(artifacts.validation) == {1, 2}
        assert all(0.0 <= acc <= 1.0 for acc in artifacts.validation.values())

    def test_resume_keeps_recorded_rows(self, stream):
        trainer = make_trainer(stream, method="SGD")
        state = trainer.init_state()
        trainer.train_task(state, stream.tasks[0].train)
        recorded = AccuracyMatrix(2)
        recorded.set(1, 1, trainer.evaluate(state, stream.tasks[0].test))
        matrix, _ = trainer.run_sequence(stream, state, matrix=recorded)
        assert matrix is recorded
        assert matrix.filled_rows() == [1, 2]
        assert matrix.backward_transfer() is not None

    def test_matrix_must_fit_the_stream(self, stream):
        with pytest.raises(ValueError, match="Accuracy matrix"):
            make_trainer(stream, method="SGD").run_sequence(stream, matrix=AccuracyMatrix(3))

    def test_accuracy_triangle(self, stream):
        trainer = make_trainer(stream, method="VCL")
        matrix, artifacts = trainer.run_sequence(stream)
        assert matrix.filled_rows() == [1, 2]
        assert np.isnan(matrix.cells[0, 1])
        assert set(artifacts.wall_clock) == {1, 2}

    def test_tasks_only_see_their_own_data(self, stream, monkeypatch):
        trainer = make_trainer(stream, method="SGD")
        seen = []
        original = trainer.train_task
        monkeypatch.setattr(trainer, "train_task", lambda state, data: seen.append(data.task_id) or original(state, data))
        trainer.run_sequence(stream)
        assert seen == [1, 2]

    def test_checkpoint_roundtrip(self, stream, tmp_path):
        trainer = make_trainer(stream, method="BGR")
        state = trainer.init_state()
        trainer.train_task(state, stream.tasks[0].train)
        path = tmp_path / "task_1.ckpt"
        CheckpointRepository.save_checkpoint(state.to_checkpoint("BGR"), path)
        restored = TrainerState.from_checkpoint(CheckpointRepository.load_checkpoint(path), trainer.config)
        np.testing.assert_array_equal(restored.posterior.mu.values, state.posterior.mu.values)
        np.testing.assert_array_equal(restored.buffer.entries()[0], state.buffer.entries()[0])
        assert restored.trained_tasks == [1]
        test = stream.tasks[0].test
        assert trainer.evaluate(restored, test) == trainer.evaluate(state, test)

    def test_resume_skips_trained_tasks(self, stream):
        trainer = make_trainer(stream, method="SGD")
        state = trainer.init_state()
        trainer.train_task(state, stream.tasks[0].train)
        matrix, artifacts = trainer.run_sequence(stream, TrainerState.from_checkpoint(state.to_checkpoint("SGD"),
                                                                                      trainer.config))
        assert matrix.filled_rows() == [2]
        assert artifacts.state.trained_tasks == [1, 2]

    def test_method_flags(self):
        assert Method.BGR.is_bayesian and Method.BGR.is_generative
        assert Method.VCL.is_bayesian and not Method.VCL.is_generative
        assert not Method.GEN_L2.is_bayesian and Method.GEN_L2.is_generative


class TestEvaluation:
    """Accuracy of argmax predictions."""

    def test_shuffled_labels_score_at_chance(self, stream):
        trainer = make_trainer(stream, method="SGD")
        state = trainer.init_state()
        rng = np.random.default_rng(17)
        state.params = ParamVector(rng.normal(0.0, 1.0, trainer.arch.num_params), trainer.arch.layout)
        x = rng.uniform(size=(10_000, stream.input_dim))
        labels = rng.integers(0, 2, 10_000)
        shuffled = TaskDataset(1, x, np.eye(2)[labels], Split.TEST)
        assert trainer.evaluate(state, shuffled) == pytest.approx(0.5, abs=0.02)


@pytest.mark.slow
class TestForgetting:
    """Task-1 accuracy after learning a conflicting second task."""

    @pytest.fixture(scope="class")
    def task_one_after_two(self, stream):
        results = {}
        for method in ("SGD", "VCL", "BGR"):
            trainer = make_trainer(stream, method=method, epochs=40, batch_size=32)
            matrix, _ = trainer.run_sequence(stream)
            results[method] = (matrix.get(1, 1), matrix.get(2, 1))
        return results

    def test_sgd_forgets_task_one(self, task_one_after_two):
        before, after = task_one_after_two["SGD"]
        assert before - after > 0.15

    def test_bayesian_methods_forget_less(self, task_one_after_two):
        sgd, vcl, bgr = (task_one_after_two[m][1] for m in ("SGD", "VCL", "BGR"))
        assert vcl >= sgd - 0.02
        assert bgr >= vcl
