"""Tests for the history-window parameter estimator."""

import numpy as np
import pytest

from mod.dynamics import PROPRIO_SCALE, EnvParams, RandomizationRanges
from mod.errors import ConfigError, ContractError
from mod.estimator import (
    ENTRY_DIM, EstimatorConfig, HistoryWindow, SampleSet, estimate, estimate_batch, evaluate_loss,
    finetune_on_policy, fit, fuse, fusion_alpha, init_estimator,
)

RANGES = RandomizationRanges()


def _linear_samples(rng, cfg, n, mixing):
    """Windows whose normalized targets are a linear map of the window."""
    windows = rng.uniform(-1.0, 1.0, size=(n, cfg.input_dim))
    return SampleSet(windows, RANGES.denormalize(windows @ mixing))


@pytest.fixture
def small_cfg():
    return EstimatorConfig(window_length=2, hidden_units=4, l2_coeff=0.0, method='lstsq',
                           finetune_iterations=1)


class TestHistoryWindow:
    """Tests for HistoryWindow."""

    def test_starts_zero_filled(self):
        window = HistoryWindow(3)
        assert window.as_array().shape == (3, ENTRY_DIM)
        np.testing.assert_array_equal(window.features(), 0.0)

    def test_push_keeps_newest_last(self):
        window = HistoryWindow(2)
        proprio = np.arange(1.0, 9.0)
        window.push(proprio, np.array([3.5, -2.5]))

        newest = window.as_array()[-1]
        np.testing.assert_allclose(newest[:8], proprio / PROPRIO_SCALE)
        np.testing.assert_allclose(newest[8:], [1.0, -1.0])
        np.testing.assert_array_equal(window.as_array()[0], 0.0)
        assert len(window) == 2

    def test_reset_clears(self):
        window = HistoryWindow(2)
        window.push(np.ones(8), np.ones(2))
        window.reset()
        np.testing.assert_array_equal(window.features(), 0.0)

    def test_bad_entry_rejected(self):
        with pytest.raises(ContractError):
            HistoryWindow(2).push(np.ones(3), np.ones(2))
        with pytest.raises(ContractError):
            HistoryWindow(0)


class TestEstimate:
    """Tests for estimates and their clamping."""

    def test_initial_estimator_predicts_midpoint(self, rng, small_cfg):
        params = init_estimator(rng, small_cfg)
        lo, hi = RANGES.bounds()
        np.testing.assert_allclose(estimate(HistoryWindow(2), params, RANGES), (lo + hi) / 2)

    def test_estimates_clamped_to_ranges(self, rng, small_cfg):
        params = init_estimator(rng, small_cfg)
        weights = params.weights.copy()
        weights[:small_cfg.input_dim * 5] = 100.0
        loud = params.with_weights(weights)
        lo, hi = RANGES.bounds()

        e_hat = estimate_batch(rng.uniform(-1, 1, size=(10, small_cfg.input_dim)), loud, RANGES)
        assert np.all(e_hat >= lo - 1e-12)
        assert np.all(e_hat <= hi + 1e-12)

    def test_wrong_width_rejected(self, rng, small_cfg):
        params = init_estimator(rng, small_cfg)
        with pytest.raises(ContractError):
            estimate_batch(np.zeros((1, 3)), params, RANGES)


class TestFusion:
    """Tests for the true/estimated parameter fusion."""

    @pytest.mark.parametrize('schedule, progress, expected', [
        ('annealed', 0.0, 1.0),
        ('annealed', 0.5, 1.0),
        ('annealed', 0.75, 0.5),
        ('annealed', 1.0, 0.0),
        ('literal', 0.0, 0.0),
        ('literal', 0.25, 0.5),
        ('literal', 1.0, 1.0),
        ('estimate_only', 0.3, 0.0),
        ('truth_only', 0.3, 1.0),
    ])
    def test_alpha_schedules(self, schedule, progress, expected):
        assert fusion_alpha(progress, schedule) == pytest.approx(expected)

    def test_progress_outside_unit_interval(self):
        with pytest.raises(ContractError):
            fusion_alpha(1.5)

    def test_unknown_schedule(self):
        with pytest.raises(ConfigError):
            fusion_alpha(0.5, 'cosine')

    def test_fuse_blends_estimated_subset(self):
        truth = EnvParams(payload_mass=10.0, friction=1.0)
        e_hat = np.array([0.0, 0.0, 0.0, 0.0, 0.5])
        fused = fuse(truth, e_hat, 0.75)
        np.testing.assert_allclose(fused, [5.0, 0.0, 0.0, 0.0, 0.75])
        np.testing.assert_allclose(fuse(truth, e_hat, 1.0), e_hat)


class TestFit:
    """Tests for estimator regression and on-policy fine-tuning."""

    def test_empty_batch_rejected(self, rng, small_cfg):
        with pytest.raises(ContractError, match="non-empty"):
            fit(SampleSet(), init_estimator(rng, small_cfg), RANGES, small_cfg)

    def test_lstsq_recovers_linear_map(self, rng, small_cfg):
        mixing = rng.normal(0.0, 0.1, size=(small_cfg.input_dim, 5))
        samples = _linear_samples(rng, small_cfg, 400, mixing)
        params, loss = fit(samples, init_estimator(rng, small_cfg), RANGES, small_cfg)

        assert loss < 1e-10
        assert evaluate_loss(_linear_samples(rng, small_cfg, 50, mixing), params, RANGES) < 1e-8

    def test_adam_reduces_loss(self, rng):
        cfg = EstimatorConfig(window_length=2, hidden_units=4, l2_coeff=0.0, learning_rate=1e-2,
                              fit_steps=200)
        mixing = rng.normal(0.0, 0.1, size=(cfg.input_dim, 5))
        samples = _linear_samples(rng, cfg, 300, mixing)
        params = init_estimator(rng, cfg)
        before = evaluate_loss(samples, params, RANGES)

        params, loss = fit(samples, params, RANGES, cfg)
        assert loss < before

    def test_finetune_lowers_heldout_loss(self, rng, small_cfg):
        """Fine-tuning on switched-loop windows improves held-out error."""
        mixing = rng.normal(0.0, 0.1, size=(small_cfg.input_dim, 5))
        train = _linear_samples(rng, small_cfg, 300, mixing)
        heldout = _linear_samples(rng, small_cfg, 60, mixing)

        _, before, after = finetune_on_policy(train, heldout, init_estimator(rng, small_cfg), RANGES,
                                              small_cfg, rng)
        assert after < before

    def test_sample_set_helpers(self, rng, small_cfg):
        samples = _linear_samples(rng, small_cfg, 10, np.zeros((small_cfg.input_dim, 5)))
        assert len(samples.concat(SampleSet())) == 10
        assert len(samples.concat(samples)) == 20
        assert len(samples.subsample(rng, 4)) == 4
        np.testing.assert_array_equal(samples.tail(3).windows, samples.windows[-3:])
