from dataclasses import replace

import numpy as np
import pytest

from autodiff import Graph
from error_handler import ShapeError, ValidationError
from frame_sampler import global_grid, uniform_indices
from model import AdaFocusModel, cumulative_average_matrix, encoder_feature_size, temporal_shift_matrices


def test_encoder_feature_size():
    assert encoder_feature_size(32, 3) == 4
    assert encoder_feature_size(8, 2) == 2
    assert encoder_feature_size(12, 3) == 2


def test_temporal_shift_replicates_ends():
    prev, nxt = temporal_shift_matrices(3)
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(prev @ x, [1.0, 1.0, 2.0])
    np.testing.assert_array_equal(nxt @ x, [2.0, 3.0, 3.0])


def test_cumulative_average():
    np.testing.assert_allclose(cumulative_average_matrix(3) @ np.array([3.0, 1.0, 2.0]), [3.0, 2.0, 2.0])


class TestForward:
    def test_trace_shapes(self, micro_model, micro_batch):
        c = micro_model.config
        videos, _ = micro_batch
        trace = micro_model.predict(videos)
        assert trace.weights.shape == (2, c.T0)
        assert trace.glance_specs.shape == (2, c.T_G, 4)
        assert trace.selected.shape == (2, c.T_L)
        assert trace.local_specs.shape == (2, c.T_L, 4)
        assert trace.probs.shape == (2, c.T_L, c.num_classes)
        np.testing.assert_allclose(trace.probs.sum(axis=2), 1.0, atol=1e-12)

    def test_untrained_policy_is_uniform_and_centred(self, micro_model, micro_batch):
        c = micro_model.config
        trace = micro_model.predict(micro_batch[0])
        np.testing.assert_allclose(trace.weights, 1.0 / c.T0, atol=1e-12)
        np.testing.assert_allclose(trace.glance_specs[..., 0], c.W / 2)
        np.testing.assert_allclose(trace.glance_specs[..., 1], c.H / 2)

    def test_inference_selection_is_deterministic(self, micro_model, micro_batch):
        first = micro_model.predict(micro_batch[0])
        second = micro_model.predict(micro_batch[0])
        assert np.array_equal(first.selected, second.selected)
        assert np.array_equal(first.probs, second.probs)

    def test_selected_frames_are_distinct(self, micro_model, micro_batch):
        trace = micro_model.predict(micro_batch[0])
        for row in trace.selected:
            assert len(set(row.tolist())) == len(row)

    def test_local_specs_are_valid_patches(self, micro_model, micro_batch):
        from patch_engine import PatchSpec
        c = micro_model.config
        for spec in micro_model.predict(micro_batch[0]).local_specs.reshape(-1, 4):
            PatchSpec.from_array(spec).validate(c.H, c.W, c.min_patch)

    def test_wrong_video_shape_is_rejected(self, micro_model):
        with pytest.raises(ShapeError):
            micro_model.predict(np.zeros((1, 3, 1, 8, 8)))

    def test_deterministic_given_seed(self, micro_config, micro_batch):
        a = AdaFocusModel(micro_config, seed=9).predict(micro_batch[0]).probs
        b = AdaFocusModel(micro_config, seed=9).predict(micro_batch[0]).probs
        assert np.array_equal(a, b)


class TestAblationSwitches:
    def test_without_frame_sampling_frames_are_uniform(self, micro_config, micro_batch):
        config = replace(micro_config, dynamic_frame_sampling=False)
        trace = AdaFocusModel(config, seed=1).predict(micro_batch[0])
        expected = uniform_indices(config.T0, config.T_L)
        assert all(np.array_equal(row, expected) for row in trace.selected)

    def test_without_spatial_policy_patches_are_centred(self, micro_config, micro_batch):
        config = replace(micro_config, spatial_policy=False)
        trace = AdaFocusModel(config, seed=1).predict(micro_batch[0])
        np.testing.assert_allclose(trace.local_specs[..., :2], config.H / 2)
        np.testing.assert_allclose(trace.local_specs[..., 2:], config.P)

    def test_fixed_size_patches(self, micro_config, micro_batch):
        config = replace(micro_config, deformable=False)
        trace = AdaFocusModel(config, seed=1).predict(micro_batch[0])
        np.testing.assert_allclose(trace.glance_specs[..., 2:], config.P)

    def test_average_classifier_variant(self, micro_config, micro_batch):
        config = replace(micro_config, classifier='average')
        probs = AdaFocusModel(config, seed=1).predict(micro_batch[0]).probs
        np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-12)


class TestClassify:
    def test_max_classifier_first_step_uses_only_first_features(self, micro_model, rng):
        g = Graph()
        p = micro_model.bind(g, requires_grad=False)
        width = micro_model.params['classifier.w'].shape[0]
        features = rng.normal(size=(1, 2, width))
        _, probs = micro_model.classify(p, g.constant(features))
        altered = features.copy()
        altered[0, 1] += 5.0
        _, probs2 = micro_model.classify(p, g.constant(altered))
        np.testing.assert_array_equal(probs.data[0, 0], probs2.data[0, 0])

    def test_needs_a_step(self, micro_model):
        g = Graph()
        p = micro_model.bind(g, requires_grad=False)
        with pytest.raises(ValidationError):
            micro_model.classify(p, g.constant(np.zeros((1, 0, 7))))


class TestParameters:
    def test_parameter_mismatch_is_rejected(self, micro_config, micro_model):
        params = dict(micro_model.params)
        params.pop('aux.w')
        with pytest.raises(ValidationError):
            AdaFocusModel(micro_config, params)

    def test_parameter_shape_is_checked(self, micro_config, micro_model):
        params = dict(micro_model.params)
        params['aux.b'] = np.zeros(7)
        with pytest.raises(ShapeError):
            AdaFocusModel(micro_config, params)

    def test_groups(self, micro_model):
        assert set(micro_model.param_groups()) == {'global', 'local', 'classifier', 'aux', 'policy'}

    def test_glance_specs_expand_to_every_frame(self, micro_model, micro_batch):
        c = micro_model.config
        trace = micro_model.predict(micro_batch[0])
        full = micro_model.glance_specs_at_all_frames(trace.glance_specs)
        assert full.shape == (2, c.T0, 4)
        np.testing.assert_allclose(full[:, global_grid(c.T0, c.T_G)], trace.glance_specs)
