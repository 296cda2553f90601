import numpy as np
import pytest
from dataclasses import replace

import cnmfg
from cnmfg.sde import (
    NoiseBundle,
    TimeGrid,
    generate_noise,
    simulate_common_state,
    simulate_driftless_state,
    simulate_markov_sde,
)
from cnmfg.equilibrium import initial_flow


class TestTimeGrid:
    def test_uniform(self):
        grid = TimeGrid(2.0, 4)
        assert grid.dt == 0.5
        np.testing.assert_allclose(grid.times, [0, 0.5, 1.0, 1.5, 2.0])

    def test_nearest_step_snaps_within_half_dt(self):
        grid = TimeGrid(1.0, 10)
        assert grid.nearest_step(0.32) == 3
        with pytest.raises(ValueError):
            grid.nearest_step(1.2)


class TestGenerateNoise:
    def test_repeatable(self):
        grid = TimeGrid(1.0, 4)
        a = generate_noise(2, grid, 7)
        b = generate_noise(2, grid, 7)
        assert np.array_equal(a.dw, b.dw)
        assert np.array_equal(a.dw0, b.dw0)

    def test_seed_separation(self):
        grid = TimeGrid(1.0, 4)
        a = generate_noise(2, grid, 7)
        b = generate_noise(2, grid, 8)
        assert not np.array_equal(a.dw, b.dw)

    def test_prefix_stability_across_path_counts(self):
        # chunked substreams: the first paths do not depend on how many follow
        grid = TimeGrid(1.0, 8)
        a = generate_noise(100, grid, 3)
        b = generate_noise(4096, grid, 3)
        assert np.array_equal(a.dw, b.dw[:100])

    def test_increment_moments(self):
        grid = TimeGrid(1.0, 50)
        noise = generate_noise(100_000, grid, 12)
        dt = grid.dt
        n = noise.dw.size
        se_var = dt * np.sqrt(2.0 / n)
        assert abs(noise.dw.mean()) <= 4 * np.sqrt(dt / n)
        assert abs(noise.dw.var() - dt) <= 4 * se_var
        assert abs(noise.dw0.var() - dt) <= 4 * se_var


class TestCommonState:
    def test_pure_integrator(self, lq_spec):
        grid = TimeGrid(1.0, 20)
        noise = generate_noise(500, grid, 3)
        xc = simulate_common_state(lq_spec, noise)
        expected = np.cumsum(noise.dw0[:, :, 0], axis=1)
        np.testing.assert_allclose(xc[:, 1:, 0], expected, atol=1e-12)

    def test_martingale_mean(self, lq_spec):
        grid = TimeGrid(1.0, 20)
        noise = generate_noise(100_000, grid, 4)
        xc = simulate_common_state(lq_spec, noise)
        terminal = xc[:, -1, 0]
        assert abs(terminal.mean()) <= 3 * terminal.std() / np.sqrt(terminal.size)

    def test_constant_drift_shift(self, lq_spec):
        spec = replace(lq_spec, common_drift=lambda t, xc: np.ones_like(xc),
                       common_drift_bound=1.0)
        grid = TimeGrid(1.0, 20)
        noise = generate_noise(100_000, grid, 5)
        terminal = simulate_common_state(spec, noise)[:, -1, 0]
        assert abs(terminal.mean() - 1.0) <= 3 * terminal.std() / np.sqrt(terminal.size)

    def test_nonfinite_drift_aborts(self, lq_spec):
        spec = replace(lq_spec, common_drift=lambda t, xc: np.full_like(xc, np.nan))
        noise = generate_noise(10, TimeGrid(1.0, 5), 6)
        with pytest.raises(RuntimeError, match="non-finite common drift"):
            simulate_common_state(spec, noise)


class TestDriftlessState:
    def test_brownian_scaling(self):
        spec = cnmfg.make_instance("lq", sigma0=0.0, init_std=0.0)
        grid = TimeGrid(1.0, 50)
        noise = generate_noise(100_000, grid, 7)
        x_t = simulate_driftless_state(spec, noise).x[:, -1, 0]
        var = x_t.var()
        se = 1.0 * np.sqrt(2.0 / x_t.size)
        assert abs(var - 1.0) <= 4 * se

    def test_covariance_with_common_state(self):
        # X_T = sigma W_T + sigma0 W0_T and Xc_T = W0_T share only W0:
        # cov = sigma0 * sigmac * T, an analytic oracle
        spec = cnmfg.make_instance("lq", init_std=0.0)
        grid = TimeGrid(1.0, 50)
        noise = generate_noise(100_000, grid, 8)
        paths = simulate_driftless_state(spec, noise)
        cov = np.cov(paths.x[:, -1, 0], paths.xc[:, -1, 0])[0, 1]
        assert cov == pytest.approx(0.5, abs=0.02)

    def test_zero_noise_gives_constant_paths(self, lq_spec):
        grid = TimeGrid(1.0, 5)
        noise = generate_noise(20, grid, 9)
        frozen = NoiseBundle(grid=grid, seed=9, dw=np.zeros_like(noise.dw),
                             dw0=np.zeros_like(noise.dw0))
        paths = simulate_driftless_state(lq_spec, frozen)
        for k in range(6):
            np.testing.assert_array_equal(paths.x[:, k], paths.x[:, 0])


class _ConstantPolicy:
    def __init__(self, value):
        self.value = value

    def actions(self, k, x, xc, key):
        return np.full((x.shape[0], 1), self.value)


class TestMarkovSde:
    def test_zero_policy_matches_driftless(self, lq_spec, small_config):
        noise = generate_noise(small_config.n_paths, small_config.grid(lq_spec),
                               small_config.seed, 1, 1)
        flow = initial_flow(lq_spec, small_config)
        driftless = simulate_driftless_state(lq_spec, noise)
        controlled = simulate_markov_sde(lq_spec, _ConstantPolicy(0.0), flow, noise)
        np.testing.assert_array_equal(controlled.x, driftless.x)
        assert controlled.clamp_count == 0

    def test_unit_policy_mean_shift(self, lq_spec, small_config):
        noise = generate_noise(20_000, small_config.grid(lq_spec), 11, 1, 1)
        flow = initial_flow(lq_spec, small_config)
        paths = simulate_markov_sde(lq_spec, _ConstantPolicy(1.0), flow, noise)
        terminal = paths.x[:, -1, 0]
        se = terminal.std() / np.sqrt(terminal.size)
        assert abs(terminal.mean() - 1.0) <= 3 * se

    def test_out_of_box_actions_clamped_and_counted(self, lq_spec, small_config):
        noise = generate_noise(100, small_config.grid(lq_spec), 12, 1, 1)
        flow = initial_flow(lq_spec, small_config)
        paths = simulate_markov_sde(lq_spec, _ConstantPolicy(2.0), flow, noise)
        assert paths.clamp_count == 100 * small_config.n_steps
        terminal = paths.x[:, -1, 0]
        assert abs(terminal.mean() - 1.0) < 0.5  # clamped to +1 drift

    def test_deterministic(self, lq_spec, small_config):
        noise = generate_noise(500, small_config.grid(lq_spec), 13, 1, 1)
        flow = initial_flow(lq_spec, small_config)
        a = simulate_markov_sde(lq_spec, _ConstantPolicy(0.3), flow, noise)
        b = simulate_markov_sde(lq_spec, _ConstantPolicy(0.3), flow, noise)
        assert np.array_equal(a.x, b.x)

    def test_discontinuous_drift_smoke(self, lq_spec, small_config):
        # measurable-only drift: no rate claim, just bounded finite paths with
        # the expected repulsion from the origin
        spec = replace(
            lq_spec,
            drift=lambda t, x, mu, a: 0.5 * np.sign(x) + 0.5 * a,
            drift_bound=1.0,
        )
        noise = generate_noise(20_000, small_config.grid(spec), 14, 1, 1)
        flow = initial_flow(spec, small_config)
        paths = simulate_markov_sde(spec, _ConstantPolicy(0.0), flow, noise)
        assert np.all(np.isfinite(paths.x))
        assert np.abs(paths.x[:, -1, 0]).mean() > np.abs(paths.x[:, 0, 0]).mean()
