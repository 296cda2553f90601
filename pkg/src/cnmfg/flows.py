"""Conditional measure flows, Wasserstein distances, and the flow metric.

A flow represents t -> law(X_t | conditioning key) as weighted-quantile bins
over the key, one empirical measure per bin.  In current-value mode the key at
step k is the common state at step k.  In partition mode the key is the common
state at the most recent partition time <= t (players react to the common
state at finitely many time points); with a partition containing every grid
point this reproduces current-value conditioning exactly.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .girsanov import GirsanovWeights
from .problem import MeasureSummary
from .sde import PathBundle, TimeGrid

__all__ = [
    "EmpiricalMeasure",
    "ConditionalMeasureFlow",
    "estimate_conditional_flow",
    "wasserstein_1d",
    "lp_transport",
    "kr_norm_diff",
    "flow_distance",
    "lookup_measure",
    "truncation_bound_check",
    "flow_to_csv",
]

_MAX_LP_ATOMS = 256   # per side; combined support capped at 512


class EmpiricalMeasure:
    """Weighted atoms in R^d, normalized to a probability measure."""

    def __init__(self, support, weights=None):
        support = np.asarray(support, dtype=float)
        if support.ndim == 1:
            support = support[:, None]
        if weights is None:
            weights = np.full(support.shape[0], 1.0 / support.shape[0])
        else:
            weights = np.asarray(weights, dtype=float).ravel()
            total = weights.sum()
            if total <= 0:
                raise ValueError("empirical measure needs positive total mass")
            weights = weights / total
        self.support = support
        self.weights = weights

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.support.shape[0]

    def summary(self, p: float = 2.0) -> MeasureSummary:
        return MeasureSummary(self.support, self.weights, p=p)

    @cached_property
    def sorted_1d(self):
        """(sorted atoms, matching weights); only valid for 1-d supports."""
        if self.dim != 1:
            raise ValueError("sorted_1d requires 1-d support")
        order = np.argsort(self.support[:, 0], kind="stable")
        return self.support[order, 0], self.weights[order]

    def canonical(self):
        """Deduplicated, sorted (atoms, weights) pairs for identity comparisons."""
        order = np.lexsort(self.support.T[::-1])
        atoms = self.support[order]
        w = self.weights[order]
        uniq, inverse = np.unique(atoms, axis=0, return_inverse=True)
        wsum = np.zeros(uniq.shape[0])
        np.add.at(wsum, inverse, w)
        keep = wsum > 0
        return uniq[keep], wsum[keep]


def _systematic_resample(support: np.ndarray, weights: np.ndarray, n_out: int) -> np.ndarray:
    """Deterministic stratified subsample after a lexicographic sort."""
    order = np.lexsort(support.T[::-1])
    atoms = support[order]
    w = weights[order]
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    u = (np.arange(n_out) + 0.5) / n_out
    idx = np.searchsorted(cdf, u, side="left")
    return atoms[np.minimum(idx, atoms.shape[0] - 1)]


# ---------------------------------------------------------------------------
# transport distances
# ---------------------------------------------------------------------------


def wasserstein_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure, q: float = 1.0) -> float:
    """Order-q Wasserstein distance between 1-d empirical measures.

    Quantile coupling: integrate |F^-1 - G^-1|^q over the merged grid of
    cumulative weights, then take the q-th root.
    """
    if mu.dim != 1 or nu.dim != 1:
        raise ValueError("wasserstein_1d requires 1-d supports")
    if q < 1:
        raise ValueError("order q must be >= 1")
    xa, wa = mu.sorted_1d
    xb, wb = nu.sorted_1d
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    levels = np.concatenate([[0.0], np.sort(np.concatenate([ca[:-1], cb[:-1]])), [1.0]])
    mass = np.diff(levels)
    mids = 0.5 * (levels[:-1] + levels[1:])
    ia = np.minimum(np.searchsorted(ca, mids, side="left"), xa.size - 1)
    ib = np.minimum(np.searchsorted(cb, mids, side="left"), xb.size - 1)
    cost = float(np.sum(mass * np.abs(xa[ia] - xb[ib]) ** q))
    return cost ** (1.0 / q)


def lp_transport(mu: EmpiricalMeasure, nu: EmpiricalMeasure, q: float = 1.0) -> float:
    """Exact optimal transport cost on the coupling polytope, via LP (HiGHS).

    Supports above 256 atoms per side are reduced by deterministic stratified
    subsampling so the combined support stays at or below 512 atoms.
    """
    if mu.dim != nu.dim:
        raise ValueError("dimension mismatch between measures")
    if q < 1:
        raise ValueError("order q must be >= 1")
    xa, wa = mu.support, mu.weights
    xb, wb = nu.support, nu.weights
    if xa.shape[0] > _MAX_LP_ATOMS:
        xa = _systematic_resample(xa, wa, _MAX_LP_ATOMS)
        wa = np.full(_MAX_LP_ATOMS, 1.0 / _MAX_LP_ATOMS)
    if xb.shape[0] > _MAX_LP_ATOMS:
        xb = _systematic_resample(xb, wb, _MAX_LP_ATOMS)
        wb = np.full(_MAX_LP_ATOMS, 1.0 / _MAX_LP_ATOMS)
    n, m = xa.shape[0], xb.shape[0]
    diff = xa[:, None, :] - xb[None, :, :]
    cost = np.linalg.norm(diff, axis=2) ** q
    # marginal constraints; the last row is redundant and dropped
    row_marg = sp.kron(sp.eye(n, format="csr"), np.ones((1, m)), format="csr")
    col_marg = sp.kron(np.ones((1, n)), sp.eye(m, format="csr"), format="csr")
    a_eq = sp.vstack([row_marg, col_marg[:-1]], format="csr")
    b_eq = np.concatenate([wa, wb[:-1]])
    # 1e-10 is the tightest tolerance HiGHS accepts; the default 1e-7 lets the
    # solver stop at vertices that are measurably suboptimal for the oracle
    # equivalence contract
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(res.fun, 0.0) ** (1.0 / q)


def _wq(mu: EmpiricalMeasure, nu: EmpiricalMeasure, q: float) -> float:
    if mu is nu:
        return 0.0
    if mu.dim == 1:
        return wasserstein_1d(mu, nu, q)
    return lp_transport(mu, nu, q)


def kr_norm_diff(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Kantorovich-Rubinstein norm of mu - nu; equals W1 for probability measures."""
    return _wq(mu, nu, 1.0)


def truncation_bound_check(x, y, radius, q):
    """Check (|x-y|^q - R^q)^+ <= 2^q |x|^q 1{|x|>=R/2} + 2^q |y|^q 1{|y|>=R/2}.

    Accepts single points or batched arrays (last axis = coordinates); returns
    a bool (or bool array for batches).
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    scalar = x.ndim <= 1 and y.ndim <= 1 and np.ndim(radius) == 0 and np.ndim(q) == 0
    x2 = np.atleast_2d(x)
    y2 = np.atleast_2d(y)
    r = np.asarray(radius, float).ravel()
    qq = np.asarray(q, float).ravel()
    nx = np.linalg.norm(x2, axis=-1)
    ny = np.linalg.norm(y2, axis=-1)
    nd = np.linalg.norm(x2 - y2, axis=-1)
    lhs = np.maximum(nd ** qq - r ** qq, 0.0)
    rhs = (2.0 ** qq) * (nx ** qq * (nx >= r / 2) + ny ** qq * (ny >= r / 2))
    ok = lhs <= rhs * (1 + 1e-12) + 1e-12
    return bool(np.all(ok)) if scalar else ok


# ---------------------------------------------------------------------------
# conditional measure flows
# ---------------------------------------------------------------------------


@dataclass
class StepBins:
    edges: np.ndarray                       # (n_bins + 1,) including outer edges
    measures: list                          # EmpiricalMeasure per bin
    counts: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.measures)


def _weighted_quantiles(values: np.ndarray, weights: np.ndarray, qs: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    cw = np.cumsum(w)
    cw /= cw[-1]
    return np.interp(qs, cw, v)


def _make_step_bins(keys: np.ndarray, atoms: np.ndarray, weights: np.ndarray,
                    n_bins: int, min_bin_count: int) -> tuple[StepBins, np.ndarray]:
    n = keys.shape[0]
    qs = np.linspace(0.0, 1.0, n_bins + 1)
    edges = _weighted_quantiles(keys, weights, qs)
    interior = np.unique(edges[1:-1])
    interior = interior[(interior > keys.min()) & (interior < keys.max())]
    assign = np.searchsorted(interior, keys, side="right")

    # merge-nearest rule: drop the separating edge of any undersized bin
    while interior.size > 0:
        counts = np.bincount(assign, minlength=interior.size + 1)
        small = np.argwhere(counts < min_bin_count).ravel()
        if small.size == 0:
            break
        b = int(small[0])
        if b == 0:
            drop = 0
        elif b == counts.size - 1:
            drop = interior.size - 1
        else:
            drop = b - 1 if counts[b - 1] <= counts[b + 1] else b
        interior = np.delete(interior, drop)
        assign = np.searchsorted(interior, keys, side="right")

    counts = np.bincount(assign, minlength=interior.size + 1)
    full_edges = np.concatenate([[keys.min()], interior, [keys.max()]])
    measures = []
    for b in range(interior.size + 1):
        sel = assign == b
        if not np.any(sel):
            measures.append(EmpiricalMeasure(np.zeros((1, atoms.shape[1])), np.ones(1)))
        else:
            measures.append(EmpiricalMeasure(atoms[sel], weights[sel]))
    return StepBins(edges=full_edges, measures=measures, counts=counts), assign


@dataclass
class ConditionalMeasureFlow:
    grid: TimeGrid
    steps: list                               # StepBins per time step
    key_idx: np.ndarray                       # (n_steps + 1,) grid index of the key
    mode: str                                 # "current" | "partition"
    partition_times: Optional[tuple]
    src_x: np.ndarray                         # (n, n_steps + 1, d_state)
    src_key: np.ndarray                       # (n, n_steps + 1)
    src_w: np.ndarray                         # (n, n_steps + 1), normalized per step
    n_bins_requested: int
    min_bin_count: int
    flow_p: float = 2.0
    retained: int = 2048
    _summaries: dict = field(default_factory=dict, repr=False)

    @property
    def n_source(self) -> int:
        return self.src_x.shape[0]

    def key_index(self, k: int) -> int:
        return int(self.key_idx[k])

    def bins_at(self, k: int) -> StepBins:
        return self.steps[k]

    def assign(self, k: int, keys: np.ndarray) -> np.ndarray:
        edges = self.steps[k].edges
        return np.searchsorted(edges[1:-1], np.asarray(keys, float), side="right")

    def measure(self, k: int, bin_idx: int) -> EmpiricalMeasure:
        return self.steps[k].measures[bin_idx]

    def summary(self, k: int, bin_idx: int) -> MeasureSummary:
        key = (k, bin_idx)
        out = self._summaries.get(key)
        if out is None:
            out = self.steps[k].measures[bin_idx].summary(self.flow_p)
            self._summaries[key] = out
        return out

    @property
    def retained_keys(self) -> np.ndarray:
        n = self.n_source
        take = min(self.retained, n)
        idx = np.unique(np.linspace(0, n - 1, take).astype(int))
        return self.src_key[idx]


def _partition_key_index(grid: TimeGrid, partition_times: Sequence[float]) -> np.ndarray:
    times = sorted(set(float(t) for t in partition_times) | {0.0, grid.horizon})
    snapped = sorted(set(grid.nearest_step(t) for t in times))
    snapped_arr = np.asarray(snapped)
    key_idx = np.empty(grid.n_steps + 1, dtype=int)
    for k in range(grid.n_steps + 1):
        key_idx[k] = snapped_arr[np.searchsorted(snapped_arr, k, side="right") - 1]
    return key_idx


def estimate_conditional_flow(x_paths: PathBundle, weights: Optional[GirsanovWeights],
                              n_bins: int, mode: str = "current",
                              partition_times: Optional[Sequence[float]] = None,
                              min_bin_count: int = 64, flow_p: float = 2.0,
                              retained: int = 2048) -> ConditionalMeasureFlow:
    """Bin the conditioning key by weighted quantiles, one empirical law per bin.

    ``weights`` may be None for unit weights; otherwise the time-matched
    stochastic-exponential values reweight the atoms (the conditional law under
    the controlled measure).  Bins with fewer than ``min_bin_count`` atoms are
    merged into their nearest neighbour.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if x_paths.xc.shape[2] != 1:
        raise NotImplementedError("conditioning keys require a one-dimensional common state")
    n = x_paths.n_paths
    grid = x_paths.grid
    max_bins = max(1, n // max(min_bin_count, 1))
    if n_bins > max_bins:
        warnings.warn(f"n_bins={n_bins} exceeds n_paths/min_bin_count; clamped to {max_bins}")
        n_bins = max_bins
    if mode == "current":
        key_idx = np.arange(grid.n_steps + 1)
        partition = None
    elif mode == "partition":
        if partition_times is None:
            raise ValueError("partition mode requires partition_times")
        key_idx = _partition_key_index(grid, partition_times)
        partition = tuple(sorted(set(float(t) for t in partition_times) | {0.0, grid.horizon}))
    else:
        raise ValueError(f"unknown conditioning mode {mode!r}")

    if weights is None:
        w_steps = np.full((n, grid.n_steps + 1), 1.0 / n)
    else:
        w_steps = weights.m.copy()
        w_steps /= w_steps.sum(axis=0, keepdims=True)

    src_key = x_paths.xc[:, key_idx, 0]
    steps = []
    for k in range(grid.n_steps + 1):
        bins, _ = _make_step_bins(src_key[:, k], x_paths.x[:, k], w_steps[:, k],
                                  n_bins, min_bin_count)
        steps.append(bins)
    return ConditionalMeasureFlow(
        grid=grid, steps=steps, key_idx=key_idx, mode=mode, partition_times=partition,
        src_x=x_paths.x, src_key=src_key, src_w=w_steps,
        n_bins_requested=n_bins, min_bin_count=min_bin_count,
        flow_p=flow_p, retained=retained,
    )


def rebuild_from_source(grid: TimeGrid, key_idx, mode, partition, src_x, src_key, src_w,
                        n_bins: int, min_bin_count: int, flow_p: float,
                        retained: int) -> ConditionalMeasureFlow:
    steps = []
    for k in range(grid.n_steps + 1):
        bins, _ = _make_step_bins(src_key[:, k], src_x[:, k], src_w[:, k],
                                  n_bins, min_bin_count)
        steps.append(bins)
    return ConditionalMeasureFlow(
        grid=grid, steps=steps, key_idx=np.asarray(key_idx), mode=mode,
        partition_times=partition, src_x=src_x, src_key=src_key, src_w=src_w,
        n_bins_requested=n_bins, min_bin_count=min_bin_count,
        flow_p=flow_p, retained=retained,
    )


def mix_flows(a: ConditionalMeasureFlow, b: ConditionalMeasureFlow,
              lam: float) -> ConditionalMeasureFlow:
    """Convex mixture (1-lam) a + lam b realized on pooled particles.

    When both flows share the same particle system (same paths, same keys) the
    mixture is exact weight blending; otherwise particles are concatenated.
    """
    if not (0.0 < lam <= 1.0):
        raise ValueError("mixing weight must lie in (0, 1]")
    if a.grid != b.grid or a.mode != b.mode or not np.array_equal(a.key_idx, b.key_idx):
        raise ValueError("flows must share grid and conditioning mode")
    same_particles = (a.src_x.shape == b.src_x.shape
                      and np.array_equal(a.src_key, b.src_key)
                      and np.array_equal(a.src_x, b.src_x))
    if same_particles:
        src_x, src_key = a.src_x, a.src_key
        src_w = (1.0 - lam) * a.src_w + lam * b.src_w
    else:
        src_x = np.concatenate([a.src_x, b.src_x], axis=0)
        src_key = np.concatenate([a.src_key, b.src_key], axis=0)
        src_w = np.concatenate([(1.0 - lam) * a.src_w, lam * b.src_w], axis=0)
    return rebuild_from_source(a.grid, a.key_idx, a.mode, a.partition_times,
                               src_x, src_key, src_w, a.n_bins_requested,
                               a.min_bin_count, a.flow_p, a.retained)


def lookup_measure(flow: ConditionalMeasureFlow, t: float, key: float) -> EmpiricalMeasure:
    """Bin measure containing the key at the grid step nearest to t.

    Keys outside the edge range clamp to the extreme bins; keys in the same bin
    return the identical measure object.
    """
    k = flow.grid.nearest_step(t)
    idx = int(flow.assign(k, np.asarray([key]))[0])
    return flow.measure(k, idx)


def flow_distance(m: ConditionalMeasureFlow, m2: ConditionalMeasureFlow,
                  q: float = 2.0) -> float:
    """Monte Carlo estimate of the flow metric.

    For each retained evaluation path, integrate W_q^2 between the two looked-up
    conditional measures over time (trapezoid rule), raise to q/2, average over
    paths, take the q-th root.  Evaluation paths are the union of both flows'
    retained key trajectories, so the estimate is symmetric.
    """
    if m.grid != m2.grid:
        raise ValueError("flow grids do not match")
    keys = np.concatenate([m.retained_keys, m2.retained_keys], axis=0)
    n_eval, n_nodes = keys.shape
    w2 = np.empty((n_eval, n_nodes))
    for k in range(n_nodes):
        bins_a = m.assign(k, keys[:, k])
        bins_b = m2.assign(k, keys[:, k])
        cache: dict = {}
        vals = np.empty(n_eval)
        for pair in zip(bins_a.tolist(), bins_b.tolist()):
            if pair not in cache:
                cache[pair] = _wq(m.measure(k, pair[0]), m2.measure(k, pair[1]), q) ** 2
        for i in range(n_eval):
            vals[i] = cache[(int(bins_a[i]), int(bins_b[i]))]
        w2[:, k] = vals
    dt = m.grid.dt
    trap_w = np.full(n_nodes, dt)
    trap_w[0] = trap_w[-1] = 0.5 * dt
    integral = w2 @ trap_w
    return float(np.mean(integral ** (q / 2.0)) ** (1.0 / q))


def flow_to_csv(flow: ConditionalMeasureFlow, path, n_quantiles: int = 33) -> None:
    """Lossy CSV summary: per (step, bin), edges plus a fixed quantile grid."""
    qs = np.linspace(0.0, 1.0, n_quantiles)
    d = flow.src_x.shape[2]
    header = ["step", "t", "bin_index", "bin_lo", "bin_hi"]
    for c in range(d):
        header.extend(f"x{c}_q{j:02d}" for j in range(n_quantiles))
    times = flow.grid.times
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, bins in enumerate(flow.steps):
            for b, mu in enumerate(bins.measures):
                row = [str(k), f"{times[k]:.17g}", str(b),
                       f"{bins.edges[b]:.17g}", f"{bins.edges[b + 1]:.17g}"]
                for c in range(d):
                    quants = _weighted_quantiles(mu.support[:, c], mu.weights, qs)
                    row.extend(f"{v:.17g}" for v in quants)
                writer.writerow(row)
