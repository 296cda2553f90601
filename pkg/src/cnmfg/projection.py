"""Markovian projection of admissible controls.

The drift of an arbitrary adapted control is regressed onto the current
(state, conditioning key) pair under the controlled measure, then inverted
back to an action cell-by-cell on a rectangular lookup grid.  The resulting
Markovian policy preserves time-t marginal laws up to Monte Carlo error, which
``mimicking_check`` quantifies, and never costs more than the original control
(``project_cost_gap``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import BasisSpec, MarkovPolicy, objective_influence, _ridge_factor, _ridge_solve
from .flows import ConditionalMeasureFlow, EmpiricalMeasure, lp_transport, _systematic_resample
from .girsanov import GirsanovWeights
from .problem import ProblemSpec, box_minimize_batch
from .sde import NoiseBundle, PathBundle, simulate_markov_sde

__all__ = [
    "project_control",
    "mimicking_check",
    "project_cost_gap",
    "lagged_noise_control",
    "MimickingReport",
]


def lagged_noise_control(spec: ProblemSpec, noise: NoiseBundle) -> np.ndarray:
    """Path-dependent probe control: the driving noise at half the current time, clamped.

    Genuinely non-Markovian in (state, common state); the canonical input for
    exercising the projection.
    """
    n = noise.n_paths
    w_path = np.zeros((n, noise.grid.n_steps + 1, noise.dw.shape[2]))
    np.cumsum(noise.dw, axis=1, out=w_path[:, 1:])
    out = np.empty((n, noise.grid.n_steps, spec.d_action))
    for k in range(noise.grid.n_steps):
        vals = w_path[:, k // 2, : spec.d_action]
        out[:, k] = np.clip(vals, spec.action_lo, spec.action_hi)
    return out


def _weighted_span(values: np.ndarray, weights: np.ndarray, sigmas: float, n_points: int):
    w = weights / weights.sum()
    mean = float(w @ values)
    var = float(w @ (values - mean) ** 2)
    half = sigmas * np.sqrt(max(var, 1e-12))
    return np.linspace(mean - half, mean + half, n_points)


def project_control(spec: ProblemSpec, paths: PathBundle, action_samples: np.ndarray,
                    flow: ConditionalMeasureFlow, weights: GirsanovWeights,
                    basis: BasisSpec, n_x: int = 41, n_key: int = 41,
                    span_sigmas: float = 3.0, inversion_tol: float = 1e-6,
                    max_flagged_frac: float = 0.01) -> MarkovPolicy:
    """Project an adapted control onto (state, key) and rebuild it as a table.

    The drift is regressed (not the action): the conditional-drift identity is
    stated for the drift, and averaging actions directly would be wrong for
    drifts that are nonlinear in the action.  Inversion failures at cells whose
    best action is strictly interior signal a non-convex drift image or basis
    underfit; more than ``max_flagged_frac`` such cells aborts.
    """
    if spec.d_state != 1 or spec.d_common != 1:
        raise NotImplementedError("lookup-table projection requires 1-d state and key")
    grid = paths.grid
    n = paths.n_paths
    n_steps = grid.n_steps
    a = np.asarray(action_samples, float)
    if a.shape[:2] != (n, n_steps):
        raise ValueError("action_samples misaligned with paths")

    fitted = basis.fit_stats(paths)
    m = weights.m
    x_axes = np.empty((n_steps, n_x))
    key_axes = np.empty((n_steps, n_key))
    tables = np.empty((n_steps, n_x, n_key, spec.d_action))
    flagged = 0
    total_cells = 0
    worst = (0.0, -1, -1)

    for k in range(n_steps):
        keys = paths.xc[:, flow.key_index(k), 0]
        bins = flow.assign(k, keys)
        t_k = grid.times[k]
        w_k = m[:, k]

        drift_vals = np.empty((n, spec.d_state))
        for b in np.unique(bins):
            sel = bins == b
            mu = flow.summary(k, int(b))
            drift_vals[sel] = np.asarray(spec.drift(t_k, paths.x[sel, k], mu, a[sel, k]), float)

        feats = fitted.features(k, paths.x[:, k], keys[:, None])
        factor = _ridge_factor(feats, fitted.ridge, sample_w=w_k)
        coef = _ridge_solve(factor, feats, drift_vals, sample_w=w_k)

        x_axes[k] = _weighted_span(paths.x[:, k, 0], w_k, span_sigmas, n_x)
        key_axes[k] = _weighted_span(keys, np.ones(n), span_sigmas, n_key)

        cell_x, cell_key = np.meshgrid(x_axes[k], key_axes[k], indexing="ij")
        cell_x = cell_x.ravel()
        cell_key = cell_key.ravel()
        cell_feats = fitted.features(k, cell_x[:, None], cell_key[:, None])
        b_hat = cell_feats @ coef

        cell_bins = flow.assign(k, cell_key)
        cell_actions = np.empty((cell_x.size, spec.d_action))
        cell_resid = np.empty(cell_x.size)
        for b in np.unique(cell_bins):
            sel = cell_bins == b
            mu = flow.summary(k, int(b))
            xs = cell_x[sel][:, None]
            target = b_hat[sel]

            def gap(actions, xs=xs, mu=mu, target=target):
                bval = np.asarray(spec.drift(t_k, xs, mu, actions), float)
                return np.sum((bval - target) ** 2, axis=1)

            act, val = box_minimize_batch(gap, spec.action_lo, spec.action_hi,
                                          int(np.count_nonzero(sel)))
            cell_actions[sel] = act
            cell_resid[sel] = np.sqrt(np.maximum(val, 0.0))

        margin = 1e-9 * np.maximum(spec.action_hi - spec.action_lo, 1.0)
        interior = np.all((cell_actions > spec.action_lo + margin)
                          & (cell_actions < spec.action_hi - margin), axis=1)
        bad = (cell_resid > inversion_tol) & interior
        flagged += int(np.count_nonzero(bad))
        total_cells += cell_x.size
        if np.any(bad):
            i = int(np.argmax(np.where(bad, cell_resid, -np.inf)))
            if cell_resid[i] > worst[0]:
                worst = (float(cell_resid[i]), k, i)
        tables[k] = cell_actions.reshape(n_x, n_key, spec.d_action)

    frac = flagged / max(total_cells, 1)
    if frac > max_flagged_frac:
        raise RuntimeError(
            f"drift inversion failed on {frac:.2%} of cells "
            f"(worst residual {worst[0]:.3g} at step {worst[1]}); "
            "non-convex drift image or basis underfit")
    return MarkovPolicy(grid=grid, kind="table", spec=spec, flow=flow,
                        x_axes=x_axes, key_axes=key_axes, tables=tables,
                        label="projected")


@dataclass
class MimickingReport:
    steps: np.ndarray
    w1: np.ndarray
    max_w1: float
    mean_w1: float
    clamp_count: int


def mimicking_check(spec: ProblemSpec, original: tuple, policy: MarkovPolicy,
                    flow: ConditionalMeasureFlow, fresh_noise: NoiseBundle,
                    checked_steps=None, atoms: int = 256) -> MimickingReport:
    """Per-step transport distance between weighted original and re-solved marginals.

    The Markovian SDE is simulated with independent noise; at each retained
    step the 2-d joint (state, common state) laws are compared by exact
    transport on stratified subsamples.
    """
    paths, weights = original
    grid = paths.grid
    if checked_steps is None:
        stride = max(1, grid.n_steps // 10)
        checked_steps = list(range(stride, grid.n_steps + 1, stride))
        if checked_steps[-1] != grid.n_steps:
            checked_steps.append(grid.n_steps)
    new_paths = simulate_markov_sde(spec, policy, flow, fresh_noise)
    m = weights.m
    vals = []
    for k in checked_steps:
        joint_a = np.column_stack([paths.x[:, k, 0], paths.xc[:, k, 0]])
        joint_b = np.column_stack([new_paths.x[:, k, 0], new_paths.xc[:, k, 0]])
        sub_a = _systematic_resample(joint_a, m[:, k] / m[:, k].sum(), atoms)
        sub_b = _systematic_resample(joint_b, np.full(joint_b.shape[0], 1.0 / joint_b.shape[0]),
                                     atoms)
        vals.append(lp_transport(EmpiricalMeasure(sub_a), EmpiricalMeasure(sub_b), q=1.0))
    vals = np.asarray(vals)
    return MimickingReport(steps=np.asarray(checked_steps), w1=vals,
                           max_w1=float(vals.max()), mean_w1=float(vals.mean()),
                           clamp_count=new_paths.clamp_count)


def project_cost_gap(spec: ProblemSpec, paths: PathBundle, action_samples: np.ndarray,
                     policy: MarkovPolicy, flow: ConditionalMeasureFlow,
                     weights: GirsanovWeights, noise: NoiseBundle):
    """J(original) - J(markovian) with a paired standard error; >= 0 up to noise."""
    j_orig, _, infl_orig, _ = objective_influence(spec, flow, action_samples, paths, noise,
                                                  weights=weights)
    n = paths.n_paths
    markov_actions = np.empty_like(np.asarray(action_samples, float))
    for k in range(paths.grid.n_steps):
        keys = paths.xc[:, flow.key_index(k), 0]
        markov_actions[:, k] = policy.actions(k, paths.x[:, k], paths.xc[:, k], keys)
    markov_actions = spec.clip_action(markov_actions)
    j_mark, _, infl_mark, _ = objective_influence(spec, flow, markov_actions, paths, noise)
    diff = infl_orig - infl_mark
    se = float(diff.std(ddof=1) / np.sqrt(n))
    return float(j_orig - j_mark), se
