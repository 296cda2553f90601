import numpy as np
import pytest

import cnmfg
from cnmfg.bsde import BasisSpec, objective_influence
from cnmfg.equilibrium import SolverConfig, initial_flow
from cnmfg.projection import (
    lagged_noise_control,
    mimicking_check,
    project_control,
    project_cost_gap,
)
from cnmfg.sde import generate_noise, simulate_driftless_state


@pytest.fixture(scope="module")
def setup(lq_spec):
    cfg = SolverConfig(seed=31, n_paths=10_000)
    grid = cfg.grid(lq_spec)
    noise = generate_noise(cfg.n_paths, grid, cfg.seed, 1, 1)
    paths = simulate_driftless_state(lq_spec, noise)
    flow = initial_flow(lq_spec, cfg, paths)
    fresh = generate_noise(cfg.n_paths, grid, cfg.eval_seed, 1, 1)
    return cfg, grid, noise, paths, flow, fresh,


def _affine_markov_actions(paths):
    # in the feature span of degree >= 1 and never clipped on 3-sigma cells
    return 0.15 * paths.x[:, :-1, :] + 0.05 * paths.xc[:, :-1, :] - 0.02


class TestProjectControl:
    def test_affine_control_recovered_on_cells(self, lq_spec, setup):
        cfg, grid, noise, paths, flow, fresh = setup
        actions = _affine_markov_actions(paths)
        _, _, _, w = objective_influence(lq_spec, flow, actions, paths, noise)
        policy = project_control(lq_spec, paths, actions, flow, w, BasisSpec(degree=2))
        worst = 0.0
        for k in (0, 20, 40):
            xg = policy.x_axes[k]
            kg = policy.key_axes[k]
            cell_x, cell_k = np.meshgrid(xg, kg, indexing="ij")
            want = 0.15 * cell_x + 0.05 * cell_k - 0.02
            got = policy.tables[k][:, :, 0]
            inside = np.abs(want) <= 0.999
            worst = max(worst, np.abs(got - want)[inside].max())
        assert worst <= 1e-3

    def test_constant_control_recovered(self, lq_spec, setup):
        cfg, grid, noise, paths, flow, fresh = setup
        actions = np.full((paths.n_paths, grid.n_steps, 1), 0.4)
        _, _, _, w = objective_influence(lq_spec, flow, actions, paths, noise)
        policy = project_control(lq_spec, paths, actions, flow, w, BasisSpec(degree=2))
        assert np.abs(policy.tables - 0.4).max() <= 1e-3

    def test_inversion_abort_machinery(self, lq_spec, setup):
        cfg, grid, noise, paths, flow, fresh = setup
        actions = _affine_markov_actions(paths)
        _, _, _, w = objective_influence(lq_spec, flow, actions, paths, noise)
        # impossible tolerance: every interior-argmin cell flags
        with pytest.raises(RuntimeError, match="drift inversion failed"):
            project_control(lq_spec, paths, actions, flow, w, BasisSpec(degree=2),
                            inversion_tol=-1.0)


class TestMimicking:
    def test_markov_baseline_and_path_dependent_ratio(self, lq_spec, setup):
        cfg, grid, noise, paths, flow, fresh = setup
        basis = BasisSpec(degree=2)

        a_mk = _affine_markov_actions(paths)
        _, _, _, w_mk = objective_influence(lq_spec, flow, a_mk, paths, noise)
        pol_mk = project_control(lq_spec, paths, a_mk, flow, w_mk, basis)
        rep_mk = mimicking_check(lq_spec, (paths, w_mk), pol_mk, flow, fresh,
                                 checked_steps=(10, 30, 50))
        assert rep_mk.clamp_count == 0

        a_pd = lagged_noise_control(lq_spec, noise)
        _, _, _, w_pd = objective_influence(lq_spec, flow, a_pd, paths, noise)
        pol_pd = project_control(lq_spec, paths, a_pd, flow, w_pd, basis)
        rep_pd = mimicking_check(lq_spec, (paths, w_pd), pol_pd, flow, fresh,
                                 checked_steps=(10, 30, 50))
        # subsampling-noise floor dominates both; the path-dependent control
        # must stay within twice the Markovian baseline
        assert rep_pd.max_w1 <= 2.0 * rep_mk.max_w1

    def test_zero_drift_both_sides_identical_law(self, setup):
        spec = cnmfg.make_instance("lq")
        cfg, grid, noise, paths, flow, fresh = setup
        actions = np.zeros((paths.n_paths, grid.n_steps, 1))
        _, _, _, w = objective_influence(spec, flow, actions, paths, noise)
        policy = project_control(spec, paths, actions, flow, w, BasisSpec(degree=2))
        rep = mimicking_check(spec, (paths, w), policy, flow, fresh,
                              checked_steps=(25, 50))
        # identical laws; the report sits at the two-sample subsampling floor
        assert rep.max_w1 <= 0.35


class TestCostGap:
    def test_affine_markov_gap_zero(self, lq_spec, setup):
        cfg, grid, noise, paths, flow, fresh = setup
        actions = _affine_markov_actions(paths)
        _, _, _, w = objective_influence(lq_spec, flow, actions, paths, noise)
        policy = project_control(lq_spec, paths, actions, flow, w, BasisSpec(degree=2))
        gap, se = project_cost_gap(lq_spec, paths, actions, policy, flow, w, noise)
        assert abs(gap) <= 3 * se + 1e-3

    def test_constant_control_gap_zero(self, lq_spec, setup):
        cfg, grid, noise, paths, flow, fresh = setup
        actions = np.full((paths.n_paths, grid.n_steps, 1), 0.4)
        _, _, _, w = objective_influence(lq_spec, flow, actions, paths, noise)
        policy = project_control(lq_spec, paths, actions, flow, w, BasisSpec(degree=2))
        gap, se = project_cost_gap(lq_spec, paths, actions, policy, flow, w, noise)
        assert abs(gap) <= 3 * se + 1e-3

    def test_path_dependent_gap_nonnegative(self, lq_spec, setup):
        cfg, grid, noise, paths, flow, fresh = setup
        actions = lagged_noise_control(lq_spec, noise)
        _, _, _, w = objective_influence(lq_spec, flow, actions, paths, noise)
        policy = project_control(lq_spec, paths, actions, flow, w, BasisSpec(degree=2))
        gap, se = project_cost_gap(lq_spec, paths, actions, policy, flow, w, noise)
        assert gap >= -3 * se
