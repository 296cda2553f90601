import numpy as np
import pytest

import cnmfg
from cnmfg.girsanov import (
    stochastic_exponential,
    unit_weights,
    weighted_conditional_values,
    weighted_expectation,
)
from cnmfg.sde import NoiseBundle, TimeGrid, generate_noise, simulate_driftless_state
from cnmfg.flows import estimate_conditional_flow


def _drift_array(noise, value):
    return np.full_like(noise.dw, value)


class TestStochasticExponential:
    def test_zero_drift_gives_unit_weights(self, lq_spec):
        noise = generate_noise(100, TimeGrid(1.0, 10), 1)
        w = stochastic_exponential(lq_spec, _drift_array(noise, 0.0), noise)
        np.testing.assert_array_equal(w.m, np.ones((100, 11)))

    def test_forced_increment_closed_form(self, lq_spec):
        # lambda = 0.5 with sum dW = 1 over T=1: M_T = exp(0.5 - 0.125)
        grid = TimeGrid(1.0, 4)
        dw = np.full((1, 4, 1), 0.25)
        dw0 = np.zeros((1, 4, 1))
        noise = NoiseBundle(grid=grid, seed=0, dw=dw, dw0=dw0)
        w = stochastic_exponential(lq_spec, _drift_array(noise, 0.5), noise)
        assert w.m_terminal[0] == pytest.approx(np.exp(0.375), rel=1e-12)

    def test_martingale_mean(self, lq_spec):
        noise = generate_noise(100_000, TimeGrid(1.0, 50), 2)
        w = stochastic_exponential(lq_spec, _drift_array(noise, 0.5), noise)
        m_t = w.m_terminal
        assert abs(m_t.mean() - 1.0) <= 3 * m_t.std() / np.sqrt(m_t.size)

    def test_martingale_mean_each_step(self, lq_spec):
        noise = generate_noise(20_000, TimeGrid(1.0, 20), 3)
        w = stochastic_exponential(lq_spec, _drift_array(noise, 0.8), noise)
        for k in range(21):
            col = w.m[:, k]
            assert abs(col.mean() - 1.0) <= 4 * max(col.std(), 1e-12) / np.sqrt(col.size)

    def test_positive_and_starts_at_one(self, lq_spec):
        noise = generate_noise(1000, TimeGrid(1.0, 30), 4)
        w = stochastic_exponential(lq_spec, _drift_array(noise, 0.9), noise)
        assert np.all(w.m > 0)
        np.testing.assert_array_equal(w.m[:, 0], 1.0)

    def test_log_linear_consistency(self, lq_spec):
        # log-domain accumulation against direct multiplicative accumulation
        noise = generate_noise(2000, TimeGrid(1.0, 50), 5)
        lam = _drift_array(noise, 0.7)
        w = stochastic_exponential(lq_spec, lam, noise)
        dt = noise.grid.dt
        m_direct = np.ones(2000)
        worst = 0.0
        for k in range(50):
            step = np.exp(lam[:, k, 0] * noise.dw[:, k, 0] - 0.5 * lam[:, k, 0] ** 2 * dt)
            m_direct = m_direct * step
            rel = np.abs(w.m[:, k + 1] - m_direct) / m_direct
            worst = max(worst, rel.max())
        assert worst <= 1e-8

    def test_nonfinite_drift_diagnostic(self, lq_spec):
        noise = generate_noise(10, TimeGrid(1.0, 5), 6)
        lam = _drift_array(noise, 0.0)
        lam[3, 2, 0] = np.nan
        with pytest.raises(RuntimeError, match=r"path 3, step 2"):
            stochastic_exponential(lq_spec, lam, noise)

    def test_fourth_moment_reported_not_asserted(self, lq_spec):
        # diagnostic only: bounded drift keeps E[M_T^4] finite
        noise = generate_noise(50_000, TimeGrid(1.0, 50), 7)
        w = stochastic_exponential(lq_spec, _drift_array(noise, 0.5), noise)
        fourth = float((w.m_terminal**4).mean())
        assert np.isfinite(fourth)


class TestWeightedExpectation:
    def test_constant_passes_through(self, lq_spec):
        noise = generate_noise(5000, TimeGrid(1.0, 20), 8)
        w = stochastic_exponential(lq_spec, _drift_array(noise, 0.5), noise)
        assert weighted_expectation(np.full(5000, 3.25), w) == pytest.approx(3.25)

    def test_unit_weights_are_plain_mean(self, lq_spec):
        w = unit_weights(TimeGrid(1.0, 10), 1000)
        values = np.arange(1000.0)
        assert weighted_expectation(values, w) == pytest.approx(values.mean())

    def test_matches_direct_drifted_simulation(self):
        # weighting the driftless state by the exponential of lambda = 0.5
        # reproduces the mean of the SDE with drift 0.5 under the same noise
        spec = cnmfg.make_instance("lq", sigma0=0.0, init_std=0.0)
        grid = TimeGrid(1.0, 50)
        noise = generate_noise(100_000, grid, 9)
        paths = simulate_driftless_state(spec, noise)
        lam = _drift_array(noise, 0.5)
        w = stochastic_exponential(spec, lam, noise)
        weighted_mean = weighted_expectation(paths.x[:, -1, 0], w)

        drifted_terminal = paths.x[:, -1, 0] + 0.5  # sigma=1, exact for constant drift
        se = 3 * drifted_terminal.std() / np.sqrt(drifted_terminal.size)
        assert abs(weighted_mean - 0.5) <= 3 * se


class TestConditionalValues:
    def test_unit_weights_recover_occupancy(self):
        bins = np.array([0, 0, 1, 1, 1, 2])
        vals = (bins == 1).astype(float)
        rep = weighted_conditional_values(vals, np.ones(6), bins, n_bins=3)
        np.testing.assert_allclose(rep.bin_means, [0, 1, 0])
        np.testing.assert_allclose(rep.counts, [2, 3, 1])

    def test_independent_weights_and_keys(self, lq_spec):
        # sigma0 = 0 decouples X^c from W, so weights are independent of bins
        spec = cnmfg.make_instance("lq", sigma0=0.0)
        grid = TimeGrid(1.0, 20)
        noise = generate_noise(50_000, grid, 10)
        paths = simulate_driftless_state(spec, noise)
        lam = _drift_array(noise, 0.5)
        w = stochastic_exponential(spec, lam, noise)
        flow = estimate_conditional_flow(paths, None, 8)
        k = 20
        bins = flow.assign(k, paths.xc[:, k, 0])
        rep = weighted_conditional_values(paths.x[:, k, 0], w.m[:, k], bins,
                                          n_bins=flow.bins_at(k).n_bins)
        for b in range(rep.n_bins):
            count = rep.counts[b]
            if count < 100:
                continue
            # normalized per-bin weight mean ~ 1 within 4 s.e.
            sel = bins == b
            se = w.m[sel, k].std() / np.sqrt(count)
            assert abs(rep.bin_weight_means[b] - 1.0) <= 4 * se / w.m[:, k].mean() + 1e-12

    def test_conditional_martingale_identity(self, lq_spec, small_config):
        # E[M_T | X^c bin] ~ 1 after global normalization on the interacting instance
        grid = small_config.grid(lq_spec)
        noise = generate_noise(20_000, grid, 11)
        paths = simulate_driftless_state(lq_spec, noise)
        lam = np.clip(0.8 * paths.x[:, :-1, :], -1, 1)  # bounded state-dependent drift
        w = stochastic_exponential(lq_spec, lam, noise)
        flow = estimate_conditional_flow(paths, w, small_config.n_bins)
        k = grid.n_steps
        bins = flow.assign(k, paths.xc[:, k, 0])
        rep = weighted_conditional_values(paths.x[:, k, 0], w.m_terminal, bins,
                                          n_bins=flow.bins_at(k).n_bins)
        valid = rep.counts >= small_config.min_bin_count
        global_mean = float(np.nanmean(rep.bin_weight_means[valid]))
        pooled_se = float(np.nanstd(rep.bin_weight_means[valid])) / np.sqrt(valid.sum())
        assert abs(global_mean - 1.0) <= 3 * max(pooled_se, 0.01)
