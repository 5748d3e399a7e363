import itertools
import math

import numpy as np
import pytest

from autodiff import Graph, backward, finite_diff_check, softmax
from error_handler import ValidationError
from frame_sampler import (central_clip_indices, deterministic_select, downsample_weight_tensor,
                           downsample_weights, exact_expected_loss, gaussian_indices, global_grid,
                           inclusion_probabilities, interpolate_specs, mc_expected_loss, random_indices,
                           sample_sequences, sample_without_replacement, upsample_weights, validate_weights)
from patch_engine import PatchSpec, random_specs


class TestSampling:
    def test_uniform_permutations_are_equally_likely(self):
        rng = np.random.default_rng(0)
        n = 60000
        seqs = sample_sequences(np.full(3, 1 / 3), 3, n, rng)
        counts = {perm: 0 for perm in itertools.permutations(range(3))}
        for row in map(tuple, seqs):
            counts[row] += 1
        sigma = math.sqrt(n * (1 / 6) * (5 / 6))
        for count in counts.values():
            assert abs(count - n / 6) <= 3 * sigma

    def test_one_hot_always_selects_its_frame(self, rng):
        weights = np.zeros(5)
        weights[3] = 1.0
        for _ in range(20):
            assert sample_without_replacement(weights, 1, rng).indices == (3,)

    def test_inclusion_probability_matches_enumeration(self):
        weights = [0.5, 0.3, 0.2]
        expected = 0.5 + 0.3 * 0.5 / 0.7 + 0.2 * 0.5 / 0.8
        assert inclusion_probabilities(weights, 2)[0] == pytest.approx(expected, abs=1e-12)
        rng = np.random.default_rng(1)
        n = 50000
        hits = np.mean((sample_sequences(weights, 2, n, rng) == 0).any(axis=1))
        assert abs(hits - expected) <= 3 * math.sqrt(expected * (1 - expected) / n)

    def test_indices_are_distinct(self, rng):
        weights = rng.dirichlet(np.ones(8))
        seqs = sample_sequences(weights, 5, 500, rng)
        assert all(len(set(row)) == 5 for row in seqs)
        sample_without_replacement(weights, 5, rng).validate(8)

    def test_not_enough_positive_mass(self, rng):
        with pytest.raises(ValidationError):
            sample_without_replacement([0.5, 0.5, 0.0], 3, rng)

    def test_weights_must_be_normalised(self):
        with pytest.raises(ValidationError):
            validate_weights([0.5, 0.6])
        with pytest.raises(ValidationError):
            validate_weights([1.2, -0.2])


class TestExactExpectedLoss:
    def test_single_selection_is_weighted_mean(self, rng):
        w = rng.dirichlet(np.ones(6))
        losses = rng.uniform(0, 2, size=6)
        assert exact_expected_loss(w, losses, 1) == pytest.approx(float(w @ losses), abs=1e-12)

    def test_full_selection_is_plain_mean(self, rng):
        w = rng.dirichlet(np.ones(5))
        losses = rng.uniform(0, 2, size=5)
        assert exact_expected_loss(w, losses, 5) == pytest.approx(losses.mean(), abs=1e-12)

    def test_regression_fixture(self):
        value = exact_expected_loss([0.4, 0.3, 0.2, 0.1], [1.0, 2.0, 3.0, 4.0], 2)
        assert value == pytest.approx(151 / 72, abs=1e-12)

    def test_fixture_agrees_with_sampling(self):
        rng = np.random.default_rng(2)
        losses = np.array([1.0, 2.0, 3.0, 4.0])
        seqs = sample_sequences([0.4, 0.3, 0.2, 0.1], 2, 200000, rng)
        assert losses[seqs].mean() == pytest.approx(151 / 72, abs=1e-2)

    def test_raising_one_loss_never_lowers_the_expectation(self, rng):
        w = rng.dirichlet(np.ones(5))
        losses = rng.uniform(0, 1, size=5)
        base = exact_expected_loss(w, losses, 3)
        for k in range(5):
            bumped = losses.copy()
            bumped[k] += 0.5
            assert exact_expected_loss(w, bumped, 3) >= base

    def test_enumeration_guard(self):
        with pytest.raises(ValidationError):
            exact_expected_loss(np.full(20, 0.05), np.ones(20), 8)


class TestMonteCarloEstimator:
    def test_single_step_is_sample_independent(self, rng):
        w = rng.dirichlet(np.ones(6))
        losses = rng.uniform(0, 3, size=6)
        g = Graph()
        value = mc_expected_loss(g.leaf(w), losses, 1, M=7, rng=rng).item()
        assert value == pytest.approx(float(w @ losses), abs=1e-12)

    def test_constant_losses(self, rng):
        g = Graph()
        value = mc_expected_loss(g.leaf(rng.dirichlet(np.ones(5))), np.full(5, 1.7), 3, M=16, rng=rng)
        assert value.item() == pytest.approx(1.7, abs=1e-12)

    def test_matches_exact_value(self):
        rng = np.random.default_rng(3)
        w = rng.dirichlet(np.ones(5))
        losses = rng.uniform(0, 3, size=5)
        g = Graph()
        estimate = mc_expected_loss(g.leaf(w), losses, 2, M=100000, rng=rng).item()
        assert estimate == pytest.approx(exact_expected_loss(w, losses, 2), abs=1e-2)

    def test_unbiased_within_four_standard_errors(self):
        rng = np.random.default_rng(4)
        for T0, T_L in [(4, 2), (5, 3), (6, 2)]:
            w = rng.dirichlet(np.ones(T0))
            losses = rng.uniform(0, 3, size=T0)
            exact = exact_expected_loss(w, losses, T_L)
            draws = [mc_expected_loss(Graph().leaf(w), losses, T_L, M=128, rng=rng).item() for _ in range(40)]
            spread = np.std(draws, ddof=1) / math.sqrt(len(draws))
            assert abs(np.mean(draws) - exact) <= 4 * spread + 1e-12

    def test_gradient_with_frozen_samples(self):
        losses = np.array([0.3, 1.2, 2.0, 0.7, 1.5])
        logits = np.random.default_rng(5).normal(size=5)

        def f(graph, leaf):
            return mc_expected_loss(softmax(leaf), losses, 3, M=32, rng=np.random.default_rng(9))
        assert finite_diff_check(f, logits, eps=1e-5) < 1e-5

    def test_batched_weights_use_per_video_streams(self):
        w = np.array([[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]])
        losses = np.array([[1.0, 2.0, 3.0, 4.0], [2.0, 2.0, 2.0, 2.0]])
        g = Graph()
        weights = g.leaf(w)
        rngs = [np.random.default_rng(1), np.random.default_rng(2)]
        value = mc_expected_loss(weights, losses, 2, M=16, rng=rngs)
        grads = backward(g, value)
        assert grads.of(weights).shape == (2, 4)
        np.testing.assert_allclose(grads.of(weights)[1], 0.0, atol=1e-12)

    def test_rejects_bad_arguments(self, rng):
        g = Graph()
        w = g.leaf(np.full(3, 1 / 3))
        with pytest.raises(ValidationError):
            mc_expected_loss(w, np.ones(3), 2, M=0, rng=rng)
        with pytest.raises(ValidationError):
            mc_expected_loss(w, np.ones(3), 2, M=4, rng=None)


class TestDeterministicSelect:
    def test_uniform_weights_pick_quarter_centres(self):
        assert deterministic_select(np.full(16, 1 / 16), 4).indices == (2, 6, 10, 14)

    def test_cdf_fixture(self):
        assert deterministic_select([0.1, 0.2, 0.3, 0.4], 2).indices == (1, 3)

    def test_concentrated_mass_takes_nearest_neighbour(self):
        w = np.full(10, 0.01 / 9)
        w[5] = 0.99
        assert deterministic_select(w, 2).indices == (4, 5)

    def test_full_selection(self):
        assert deterministic_select(np.full(6, 1 / 6), 6).indices == tuple(range(6))

    def test_mass_shifted_later_never_moves_picks_earlier(self):
        T0 = 12
        positions = np.arange(T0)
        previous = None
        for centre in np.linspace(2, 9, 8):
            w = np.exp(-0.5 * ((positions - centre) / 2.0) ** 2)
            picked = np.array(deterministic_select(w / w.sum(), 3).indices)
            if previous is not None:
                assert np.all(picked >= previous)
            previous = picked


class TestGrids:
    def test_downsample_identity(self, rng):
        w = rng.dirichlet(np.ones(6))
        np.testing.assert_allclose(downsample_weights(w, 6), w)

    def test_downsample_uniform(self):
        np.testing.assert_allclose(downsample_weights(np.full(8, 1 / 8), 4), np.full(4, 0.25))

    def test_downsample_bin_sums(self):
        np.testing.assert_allclose(downsample_weights([0.1, 0.2, 0.3, 0.4], 2), [0.3, 0.7])

    def test_downsample_tensor_keeps_rows_normalised(self, rng):
        g = Graph()
        coarse = downsample_weight_tensor(g.leaf(rng.dirichlet(np.ones(8), size=3)), 4)
        np.testing.assert_allclose(coarse.data.sum(axis=1), 1.0)

    def test_upsample_constant_logits_is_uniform(self):
        g = Graph()
        out = upsample_weights(g.constant(np.full((2, 4), 0.3)), 16)
        np.testing.assert_allclose(out.data, 1 / 16)

    def test_upsample_identity_grid_is_softmax(self, rng):
        g = Graph()
        logits = rng.normal(size=(1, 5))
        out = upsample_weights(g.constant(logits), 5)
        e = np.exp(logits - logits.max())
        np.testing.assert_allclose(out.data, e / e.sum())

    def test_upsample_hot_logit_is_unimodal(self):
        g = Graph()
        logits = np.zeros((1, 4))
        logits[0, 2] = 3.0
        w = upsample_weights(g.constant(logits), 16).data[0]
        peak = int(np.argmax(w))
        assert peak == global_grid(16, 4)[2]
        assert np.all(np.diff(w[:peak + 1]) >= 0)
        assert np.all(np.diff(w[peak:]) <= 0)

    def test_interpolated_specs_hit_grid_values(self, rng):
        specs = random_specs(rng, 4, 32, 32, 12, 6.0, deformable=True)
        grid = global_grid(16, 4)
        np.testing.assert_allclose(interpolate_specs(specs, grid, 16, 32, 32, 6.0), specs)
        mid = interpolate_specs(specs, [(grid[0] + grid[1]) // 2], 16, 32, 32, 6.0)
        assert np.all(mid >= np.minimum(specs[0], specs[1]) - 1e-12)
        assert np.all(mid <= np.maximum(specs[0], specs[1]) + 1e-12)

    def test_interpolated_specs_are_clamped_into_the_frame(self):
        # centres off the frame, one size below the floor, one above the frame
        specs = np.array([[-3.0, 40.0, 2.0, 50.0], [35.0, -1.0, 40.0, 1.0]])
        out = interpolate_specs(specs, [0, 3, 7], 8, 32, 32, 6.0)
        assert out.shape == (3, 4)
        for row in out:
            PatchSpec.from_array(row).validate(32, 32, p_min=6.0)


class TestBaselines:
    def test_random_indices_are_sorted_and_distinct(self, rng):
        picked = random_indices(rng, 10, 4).indices
        assert list(picked) == sorted(set(picked)) and len(picked) == 4

    def test_central_clip(self):
        assert central_clip_indices(16, 4).indices == (6, 7, 8, 9)

    def test_gaussian_indices_stay_valid(self, rng):
        gaussian_indices(rng, 16, 5).validate(16)
