"""Backward least-squares Monte Carlo for the optimality BSDE.

Backward recursion on driftless reference paths: at each step the martingale
integrands are regressed from increment products, the driver is the minimized
Hamiltonian evaluated pathwise at the regressed integrand, and the value is
regressed from value-plus-driver.  The feedback control is the Hamiltonian
minimizer at the regressed integrand.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .flows import ConditionalMeasureFlow
from .girsanov import self_normalized_mean, stochastic_exponential
from .problem import ProblemSpec, minimize_hamiltonian_batch
from .sde import NoiseBundle, PathBundle, TimeGrid

__all__ = [
    "BasisSpec",
    "BsdeSolution",
    "MarkovPolicy",
    "solve_bsde",
    "extract_control",
    "evaluate_objective",
    "policy_to_csv",
]


def _monomial_exponents(n_vars: int, degree: int):
    exps = []

    def rec(prefix, remaining, budget):
        if remaining == 0:
            exps.append(tuple(prefix))
            return
        for e in range(budget + 1):
            rec(prefix + [e], remaining - 1, budget - e)

    rec([], n_vars, degree)
    exps.sort(key=lambda e: (sum(e), e))
    return exps


@dataclass
class BasisSpec:
    """Polynomial features of total degree <= degree in standardized (x, x^c).

    Both the raw inputs and the monomial columns are standardized against the
    per-step reference-measure sample, so the ridge penalty acts uniformly
    across shape terms; the intercept column stays at one.
    """

    degree: int = 2
    ridge: float = 1e-8
    stats: Optional[np.ndarray] = None       # (n_steps + 1, 2, n_vars) input mean/std
    col_stats: Optional[np.ndarray] = None   # (n_steps + 1, 2, n_features) column mean/std

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")

    def exponents(self, n_vars: int):
        return _monomial_exponents(n_vars, self.degree)

    def n_features(self, n_vars: int) -> int:
        return len(self.exponents(n_vars))

    def fit_stats(self, paths: PathBundle) -> "BasisSpec":
        raw = np.concatenate([paths.x, paths.xc], axis=2)
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        # a degenerate (constant) variable contributes nothing: mapping it to
        # zero keeps off-sample evaluation benign instead of exploding
        std = np.where(std < 1e-10, np.inf, std)
        stats = np.stack([mean, std], axis=1)
        fitted = BasisSpec(degree=self.degree, ridge=self.ridge, stats=stats)
        n_steps1, _, n_vars = stats.shape
        n_feat = fitted.n_features(n_vars)
        col_stats = np.zeros((n_steps1, 2, n_feat))
        col_stats[:, 1] = 1.0
        for k in range(n_steps1):
            cols = fitted._monomials(k, raw[:, k, : paths.x.shape[2]], raw[:, k, paths.x.shape[2]:])
            col_stats[k, 0] = cols.mean(axis=0)
            col_std = cols.std(axis=0)
            col_stats[k, 1] = np.where(col_std < 1e-12, np.inf, col_std)
        col_stats[:, 0, 0] = 0.0   # intercept stays the constant one
        col_stats[:, 1, 0] = 1.0
        fitted.col_stats = col_stats
        return fitted

    def _monomials(self, k: int, x: np.ndarray, xc: np.ndarray) -> np.ndarray:
        raw = np.concatenate([np.atleast_2d(x), np.atleast_2d(xc)], axis=1)
        z = (raw - self.stats[k, 0]) / self.stats[k, 1]
        exps = self.exponents(raw.shape[1])
        out = np.empty((raw.shape[0], len(exps)))
        for j, e in enumerate(exps):
            col = np.ones(raw.shape[0])
            for v, p in enumerate(e):
                if p:
                    col = col * z[:, v] ** p
            out[:, j] = col
        return out

    def features(self, k: int, x: np.ndarray, xc: np.ndarray) -> np.ndarray:
        if self.stats is None:
            raise ValueError("basis statistics not fitted")
        cols = self._monomials(k, x, xc)
        if self.col_stats is not None:
            cols = (cols - self.col_stats[k, 0]) / self.col_stats[k, 1]
            cols[:, 0] = 1.0
        return cols


def _ridge_factor(feats: np.ndarray, ridge: float, sample_w: Optional[np.ndarray] = None):
    n = feats.shape[0]
    if sample_w is None:
        gram = feats.T @ feats / n
    else:
        gram = feats.T @ (feats * sample_w[:, None]) / sample_w.sum()
    # features are standardized and the constant column comes first; leave the
    # intercept unpenalized so shrinkage never biases the level
    penalty = ridge * np.eye(feats.shape[1])
    penalty[0, 0] = 0.0
    gram = gram + penalty
    return cho_factor(gram)


def _ridge_solve(factor, feats: np.ndarray, targets: np.ndarray,
                 sample_w: Optional[np.ndarray] = None) -> np.ndarray:
    n = feats.shape[0]
    t = targets if targets.ndim == 2 else targets[:, None]
    if sample_w is None:
        rhs = feats.T @ t / n
    else:
        rhs = feats.T @ (t * sample_w[:, None]) / sample_w.sum()
    coef = cho_solve(factor, rhs)
    return coef if targets.ndim == 2 else coef[:, 0]


@dataclass
class BsdeSolution:
    grid: TimeGrid
    basis: BasisSpec
    y_coef: np.ndarray           # (n_steps, n_features)
    z_coef: np.ndarray           # (n_steps, d_state, n_features)
    z0_coef: np.ndarray          # (n_steps, d_common, n_features)
    y0: float
    y0_stderr: float
    residual_var: np.ndarray     # (n_steps,)
    control_samples: Optional[np.ndarray] = None   # (n, n_steps, d_action)

    def z_at(self, k: int, x: np.ndarray, xc: np.ndarray) -> np.ndarray:
        return self.basis.features(k, x, xc) @ self.z_coef[k].T

    def z_smoothed(self, k: int, x: np.ndarray, xc: np.ndarray, window: int = 9) -> np.ndarray:
        """Integrand averaged over a centred step window.

        The integrand is continuous in time, so averaging the per-step fits
        trades an O(window * dt) bias for a substantial variance cut; each
        neighbour is evaluated under its own standardization.
        """
        n_steps = self.z_coef.shape[0]
        lo, hi = max(0, k - window // 2), min(n_steps, k + window // 2 + 1)
        out = self.z_at(lo, x, xc)
        for j in range(lo + 1, hi):
            out = out + self.z_at(j, x, xc)
        return out / (hi - lo)

    def y_at(self, k: int, x: np.ndarray, xc: np.ndarray) -> np.ndarray:
        return self.basis.features(k, x, xc) @ self.y_coef[k]


def _terminal_values(spec: ProblemSpec, flow: ConditionalMeasureFlow,
                     paths: PathBundle) -> np.ndarray:
    k = paths.grid.n_steps
    keys = paths.xc[:, flow.key_index(k), 0]
    bins = flow.assign(k, keys)
    out = np.empty(paths.n_paths)
    for b in np.unique(bins):
        sel = bins == b
        mu = flow.summary(k, int(b))
        out[sel] = np.asarray(spec.terminal_cost(paths.x[sel, k], mu), float)
    return out


def solve_bsde(spec: ProblemSpec, flow: ConditionalMeasureFlow, paths: PathBundle,
               noise: NoiseBundle, basis: BasisSpec, driver: str = "hamiltonian",
               store_actions: bool = True, explosion_threshold: float = 1e8) -> BsdeSolution:
    """Backward LSMC pass for the value process and its martingale integrands.

    ``driver="zero"`` switches the driver off (martingale test mode).  The
    integrand targets are centred by the preliminary value fit before the
    increment regression, which removes the dominant 1/dt variance term
    without changing the conditional expectation.
    """
    if paths.label != "driftless":
        raise ValueError("solve_bsde expects reference-measure (driftless) paths")
    if driver not in ("hamiltonian", "zero"):
        raise ValueError("driver must be 'hamiltonian' or 'zero'")
    grid = paths.grid
    n = paths.n_paths
    dt = grid.dt
    fitted = basis.fit_stats(paths)
    n_feat = fitted.n_features(spec.d_state + spec.d_common)
    n_steps = grid.n_steps

    y_coef = np.zeros((n_steps, n_feat))
    z_coef = np.zeros((n_steps, spec.d_state, n_feat))
    z0_coef = np.zeros((n_steps, spec.d_common, n_feat))
    resid = np.zeros(n_steps)
    actions = np.zeros((n, n_steps, spec.d_action)) if store_actions else None

    y_next = _terminal_values(spec, flow, paths)
    # raw pathwise accumulation: the intercept makes every regression mean-
    # preserving, so mean(step-0 target) == mean(raw sum); its spread is the
    # honest standard error for the value estimate
    raw_sum = y_next.copy()
    y0 = 0.0
    for k in range(n_steps - 1, -1, -1):
        feats = fitted.features(k, paths.x[:, k], paths.xc[:, k])
        factor = _ridge_factor(feats, fitted.ridge)
        c_pre = _ridge_solve(factor, feats, y_next)
        y_fit_pre = feats @ c_pre
        centred = y_next - y_fit_pre

        zt = centred[:, None] * noise.dw[:, k] / dt
        z0t = centred[:, None] * noise.dw0[:, k] / dt
        z_coef[k] = _ridge_solve(factor, feats, zt).T
        z0_coef[k] = _ridge_solve(factor, feats, z0t).T

        if driver == "zero":
            h = np.zeros(n)
        else:
            z_hat = feats @ z_coef[k].T
            keys = paths.xc[:, flow.key_index(k), 0]
            bins = flow.assign(k, keys)
            h = np.empty(n)
            t_k = grid.times[k]
            for b in np.unique(bins):
                sel = bins == b
                mu = flow.summary(k, int(b))
                a_b, h_b = minimize_hamiltonian_batch(spec, t_k, paths.x[sel, k], mu, z_hat[sel])
                h[sel] = h_b
                if store_actions:
                    actions[sel, k] = a_b

        raw_sum += h * dt
        target = y_next + h * dt
        y_coef[k] = c_pre + _ridge_solve(factor, feats, h * dt)
        y_fit = feats @ y_coef[k]
        resid[k] = float(np.mean((target - y_fit) ** 2))
        if resid[k] > explosion_threshold:
            raise RuntimeError(
                f"BSDE regression exploded at step {k}: residual variance {resid[k]:.3g}")
        if k == 0:
            y0 = float(target.mean())
        y_next = y_fit
    y0_se = float(raw_sum.std(ddof=1) / np.sqrt(n))

    return BsdeSolution(grid=grid, basis=fitted, y_coef=y_coef, z_coef=z_coef,
                        z0_coef=z0_coef, y0=y0, y0_stderr=y0_se, residual_var=resid,
                        control_samples=actions)


@dataclass
class MarkovPolicy:
    """Feedback control on the grid: either a Hamiltonian-minimizer closure over
    the regressed integrand, or a rectangular lookup table with bilinear
    interpolation (clamped extrapolation)."""

    grid: TimeGrid
    kind: str                                      # "feedback" | "table"
    spec: Optional[ProblemSpec] = None
    flow: Optional[ConditionalMeasureFlow] = None
    solution: Optional[BsdeSolution] = None
    x_axes: Optional[np.ndarray] = None            # (n_steps, nx)
    key_axes: Optional[np.ndarray] = None          # (n_steps, nk)
    tables: Optional[np.ndarray] = None            # (n_steps, nx, nk, d_action)
    z_window: int = 9
    label: str = ""

    def actions(self, k: int, x: np.ndarray, xc: np.ndarray, key: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "feedback":
            z_hat = self.solution.z_smoothed(k, x, np.atleast_2d(xc), self.z_window)
            bins = self.flow.assign(k, key)
            out = np.empty((x.shape[0], self.spec.d_action))
            t_k = self.grid.times[k]
            for b in np.unique(bins):
                sel = bins == b
                mu = self.flow.summary(k, int(b))
                out[sel], _ = minimize_hamiltonian_batch(self.spec, t_k, x[sel], mu, z_hat[sel])
            return out
        if self.kind == "table":
            return _bilinear(self.x_axes[k], self.key_axes[k], self.tables[k],
                             x[:, 0], np.asarray(key, float))
        raise ValueError(f"unknown policy kind {self.kind!r}")


def _bilinear(x_axis: np.ndarray, k_axis: np.ndarray, table: np.ndarray,
              x: np.ndarray, key: np.ndarray) -> np.ndarray:
    xq = np.clip(x, x_axis[0], x_axis[-1])
    kq = np.clip(key, k_axis[0], k_axis[-1])
    ix = np.clip(np.searchsorted(x_axis, xq, side="right") - 1, 0, x_axis.size - 2)
    ik = np.clip(np.searchsorted(k_axis, kq, side="right") - 1, 0, k_axis.size - 2)
    tx = (xq - x_axis[ix]) / (x_axis[ix + 1] - x_axis[ix])
    tk = (kq - k_axis[ik]) / (k_axis[ik + 1] - k_axis[ik])
    tx = tx[:, None]
    tk = tk[:, None]
    v00 = table[ix, ik]
    v10 = table[ix + 1, ik]
    v01 = table[ix, ik + 1]
    v11 = table[ix + 1, ik + 1]
    return ((1 - tx) * (1 - tk) * v00 + tx * (1 - tk) * v10
            + (1 - tx) * tk * v01 + tx * tk * v11)


def extract_control(solution: BsdeSolution, spec: ProblemSpec,
                    flow: ConditionalMeasureFlow, z_window: int = 9) -> MarkovPolicy:
    """Feedback policy: Hamiltonian minimizer at the time-averaged regressed integrand."""
    return MarkovPolicy(grid=solution.grid, kind="feedback", spec=spec, flow=flow,
                        solution=solution, z_window=z_window, label="bsde-feedback")


def objective_influence(spec: ProblemSpec, flow: ConditionalMeasureFlow,
                        control_samples: np.ndarray, paths: PathBundle,
                        noise: NoiseBundle, weights=None):
    """Weak-formulation objective estimate with per-path influence values.

    Builds the sigma^-1 drift samples for the supplied adapted actions, weights
    paths by the stochastic exponential, and self-normalizes.  Precomputed
    weights for the same control may be passed to skip the exponential.
    """
    grid = paths.grid
    n = paths.n_paths
    n_steps = grid.n_steps
    a = np.asarray(control_samples, float)
    if a.shape[:2] != (n, n_steps):
        raise ValueError(f"control_samples shape {a.shape} does not match paths")
    lam = np.empty((n, n_steps, spec.d_state)) if weights is None else None
    run_cost = np.zeros(n)
    sig_inv_t = spec.sigma_inv.T
    for k in range(n_steps):
        keys = paths.xc[:, flow.key_index(k), 0]
        bins = flow.assign(k, keys)
        t_k = grid.times[k]
        for b in np.unique(bins):
            sel = bins == b
            mu = flow.summary(k, int(b))
            if lam is not None:
                drift = np.asarray(spec.drift(t_k, paths.x[sel, k], mu, a[sel, k]), float)
                lam[sel, k] = drift @ sig_inv_t
            run_cost[sel] += np.asarray(
                spec.running_cost(t_k, paths.x[sel, k], mu, a[sel, k]), float) * grid.dt
    if weights is None:
        weights = stochastic_exponential(spec, lam, noise)
    payoff = run_cost + _terminal_values(spec, flow, paths)
    est, se, infl = self_normalized_mean(payoff, weights.m_terminal)
    return est, se, infl, weights


def evaluate_objective(spec: ProblemSpec, flow: ConditionalMeasureFlow,
                       control_samples: np.ndarray, paths: PathBundle,
                       noise: NoiseBundle):
    """Objective under the weak formulation; returns (estimate, stderr)."""
    est, se, _, _ = objective_influence(spec, flow, control_samples, paths, noise)
    return est, se


def policy_to_csv(policy: MarkovPolicy, path) -> None:
    if policy.kind != "table":
        raise ValueError("only table policies serialize to CSV")
    times = policy.grid.times
    d_a = policy.tables.shape[3]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "xc"] + [f"a{j}" for j in range(d_a)])
        for k in range(policy.tables.shape[0]):
            for i, xv in enumerate(policy.x_axes[k]):
                for j, kv in enumerate(policy.key_axes[k]):
                    row = [f"{times[k]:.17g}", f"{xv:.17g}", f"{kv:.17g}"]
                    row.extend(f"{v:.17g}" for v in policy.tables[k, i, j])
                    writer.writerow(row)
