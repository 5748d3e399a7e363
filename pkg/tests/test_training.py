from dataclasses import replace

import numpy as np
import pytest

from config import OptimizerConfig, RunConfig
from evaluation import EVAL_COLUMNS, Evaluator
from model import AdaFocusModel
from monitoring import TrainingMonitor
from training import (Trainer, gradient_check_model, gradient_routing, loss_columns, per_frame_cross_entropy,
                      rng_for, training_step)


def test_rng_streams_are_reproducible_and_distinct():
    a = rng_for(0, 3, 1, 7).random(4)
    assert np.array_equal(a, rng_for(0, 3, 1, 7).random(4))
    assert not np.array_equal(a, rng_for(0, 3, 2, 7).random(4))
    assert not np.array_equal(a, rng_for(0, 3, 1, 8).random(4))


def test_per_frame_cross_entropy_uniform_logits():
    losses = per_frame_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
    np.testing.assert_allclose(losses, np.log(4.0))


class TestLossColumns:
    def test_full_objective(self, micro_model):
        assert loss_columns(micro_model) == ['total', 'l_prime', 'l_prime_random', 'l_spatial', 'l_temporal']

    def test_naive_objective(self, micro_config):
        model = AdaFocusModel(replace(micro_config, naive_objective=True))
        assert loss_columns(model) == ['total', 'l_prime']

    def test_ablated_terms_are_dropped(self, micro_config):
        config = replace(micro_config, diversity_augmentation=False, dynamic_frame_sampling=False)
        assert loss_columns(AdaFocusModel(config)) == ['total', 'l_prime', 'l_spatial']

    def test_step_reports_exactly_the_columns(self, micro_model, micro_batch):
        videos, labels = micro_batch
        result = training_step(micro_model, videos, labels, [0, 1], step=0, seed=0)
        assert list(result.losses) == loss_columns(micro_model)


class TestTrainingStep:
    def test_losses_and_gradients_are_finite(self, micro_model, micro_batch):
        videos, labels = micro_batch
        result = training_step(micro_model, videos, labels, [0, 1], step=0, seed=0)
        assert all(np.isfinite(v) for v in result.losses.values())
        assert set(result.grads) == set(micro_model.params)
        for name, grad in result.grads.items():
            assert grad.shape == micro_model.params[name].shape
            assert np.all(np.isfinite(grad))
        assert 0.0 <= result.metrics['train_accuracy'] <= 1.0

    def test_step_does_not_touch_parameters(self, micro_model, micro_batch):
        before = {k: v.copy() for k, v in micro_model.params.items()}
        training_step(micro_model, *micro_batch, [0, 1], step=0, seed=0)
        assert all(np.array_equal(before[k], micro_model.params[k]) for k in before)

    def test_same_seed_same_step_is_bitwise_repeatable(self, micro_model, micro_batch):
        a = training_step(micro_model, *micro_batch, [0, 1], step=4, seed=2)
        b = training_step(micro_model, *micro_batch, [0, 1], step=4, seed=2)
        assert a.losses == b.losses
        assert all(np.array_equal(a.grads[k], b.grads[k]) for k in a.grads)


class TestGradientRouting:
    @pytest.fixture
    def routing(self, micro_model, micro_batch):
        return gradient_routing(micro_model, *micro_batch, [0, 1])

    def test_recognition_loss_never_reaches_the_policy(self, routing):
        assert 'policy' not in routing['l_prime']
        assert {'global', 'local', 'classifier'} <= routing['l_prime']

    def test_random_crop_twin_trains_local_side_only(self, routing):
        assert 'policy' not in routing['l_prime_random']
        assert 'global' not in routing['l_prime_random']
        assert 'local' in routing['l_prime_random']

    def test_spatial_loss_trains_policy_and_aux_only(self, routing):
        assert routing['l_spatial'] <= {'policy', 'aux'}
        assert 'aux' in routing['l_spatial']

    def test_temporal_loss_trains_policy_only(self, routing):
        assert routing['l_temporal'] <= {'policy'}

    def test_naive_objective_reaches_the_policy(self, small_model_config, small_dataset):
        model = AdaFocusModel(replace(small_model_config, naive_objective=True), seed=3)
        routing = gradient_routing(model, small_dataset.frames[:2], small_dataset.labels[:2], [0, 1])
        assert 'policy' in routing['l_prime']


@pytest.mark.slow
def test_full_objective_matches_finite_differences(micro_model, micro_batch):
    errors = gradient_check_model(micro_model, *micro_batch, [0, 1], eps=1e-6, coords_per_param=2)
    assert max(errors.values()) < 1e-4


class TestTrainer:
    def _run_config(self, small_model_config, small_synth, steps=4):
        return RunConfig(model=small_model_config, synth=small_synth, optimizer=OptimizerConfig(),
                         steps=steps, batch_size=4, eval_every=2, log_every=1).validate()

    def test_batches_are_deterministic_and_full(self, small_model_config, small_synth):
        config = self._run_config(small_model_config, small_synth)
        trainer = Trainer(config, AdaFocusModel(small_model_config))
        first = next(trainer.batches(10))
        again = next(Trainer(config, AdaFocusModel(small_model_config)).batches(10))
        assert np.array_equal(first, again)
        gen = trainer.batches(10)
        seen = [next(gen) for _ in range(2)]
        assert all(b.size == 4 for b in seen)
        assert len(set(np.concatenate(seen).tolist())) == 8

    def test_fit_records_steps_and_evaluations(self, small_model_config, small_synth, small_dataset):
        config = self._run_config(small_model_config, small_synth)
        model = AdaFocusModel(small_model_config, seed=1)
        monitor = TrainingMonitor(loss_columns(model), EVAL_COLUMNS)
        holdout = small_dataset.subset(range(8, 12))
        trainer = Trainer(config, model, monitor, Evaluator(holdout).as_callback())
        before = {k: v.copy() for k, v in model.params.items()}

        last = trainer.fit(small_dataset.frames[:8], small_dataset.labels[:8])

        assert set(last) == set(loss_columns(model))
        frame = monitor.to_frame()
        assert frame['step'].tolist() == [0, 1, 2, 3]
        assert frame['eval_accuracy'].notna().tolist() == [False, True, False, True]
        assert any(not np.array_equal(before[k], model.params[k]) for k in before)
        assert all(np.array_equal(trainer.last_good[k], model.params[k]) for k in model.params)

    def test_learning_rate_decays(self, small_model_config, small_synth, small_dataset):
        config = self._run_config(small_model_config, small_synth, steps=3)
        model = AdaFocusModel(small_model_config)
        monitor = TrainingMonitor(loss_columns(model))
        Trainer(config, model, monitor).fit(small_dataset.frames[:8], small_dataset.labels[:8])
        lrs = monitor.to_frame()['lr'].tolist()
        assert lrs[0] == pytest.approx(config.optimizer.lr_local)
        assert lrs[0] > lrs[1] > lrs[2]
