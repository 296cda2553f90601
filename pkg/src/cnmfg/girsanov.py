"""Stochastic exponential weights for the change of measure, and weighted means.

Weights are accumulated in the log domain; linear-domain values are produced
lazily.  All expectation estimators are self-normalized ratios, so the
discretization bias of the normalizing constant cancels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .problem import ProblemSpec
from .sde import NoiseBundle, TimeGrid

__all__ = [
    "GirsanovWeights",
    "stochastic_exponential",
    "weighted_expectation",
    "self_normalized_mean",
    "weighted_conditional_values",
    "ConditionalBinReport",
]


@dataclass
class GirsanovWeights:
    grid: TimeGrid
    log_m: np.ndarray                       # (n_paths, n_steps + 1), log M_t
    _m: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.log_m.shape[0]

    @property
    def m(self) -> np.ndarray:
        if self._m is None:
            self._m = np.exp(self.log_m)
        return self._m

    @property
    def m_terminal(self) -> np.ndarray:
        return self.m[:, -1]

    def at_step(self, k: int) -> np.ndarray:
        return self.m[:, k]

    @property
    def normalization(self) -> float:
        """Mean terminal weight; 1 in expectation by the martingale property."""
        return float(self.m_terminal.mean())


def unit_weights(grid: TimeGrid, n_paths: int) -> GirsanovWeights:
    return GirsanovWeights(grid=grid, log_m=np.zeros((n_paths, grid.n_steps + 1)))


def stochastic_exponential(spec: ProblemSpec, drift_samples: np.ndarray,
                           noise: NoiseBundle) -> GirsanovWeights:
    """Exponential martingale of the supplied sigma^-1 drift against W.

    ``drift_samples`` has shape (n_paths, n_steps, d_state) and already contains
    sigma^-1 b evaluations;  log M accumulates lambda . dW - |lambda|^2 dt / 2.
    """
    lam = np.asarray(drift_samples, float)
    if lam.shape != noise.dw.shape:
        raise ValueError(f"drift_samples shape {lam.shape} != increments shape {noise.dw.shape}")
    if not np.all(np.isfinite(lam)):
        path, step = np.argwhere(~np.isfinite(lam).all(axis=2))[0]
        raise RuntimeError(f"non-finite drift sample at path {path}, step {step}")
    dt = noise.grid.dt
    dlog = np.einsum("nsk,nsk->ns", lam, noise.dw) - 0.5 * dt * np.einsum("nsk,nsk->ns", lam, lam)
    log_m = np.zeros((lam.shape[0], noise.grid.n_steps + 1))
    np.cumsum(dlog, axis=1, out=log_m[:, 1:])
    return GirsanovWeights(grid=noise.grid, log_m=log_m)


def self_normalized_mean(values: np.ndarray, weights: np.ndarray):
    """Ratio estimator sum(w v)/sum(w) with its influence values and standard error."""
    v = np.asarray(values, float).ravel()
    w = np.asarray(weights, float).ravel()
    if v.shape != w.shape:
        raise ValueError("values and weights must be aligned by path")
    wbar = w.mean()
    est = float((w * v).sum() / w.sum())
    influence = w * (v - est) / wbar
    stderr = float(influence.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("inf")
    return est, stderr, influence


def weighted_expectation(values: np.ndarray, weights: GirsanovWeights) -> float:
    """Self-normalized importance-sampling mean under the terminal weights."""
    est, _, _ = self_normalized_mean(values, weights.m_terminal)
    return est


@dataclass
class ConditionalBinReport:
    bin_means: np.ndarray           # per-bin self-normalized mean of values
    bin_weight_means: np.ndarray    # per-bin mean weight / global mean weight
    counts: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.bin_means.shape[0]


def weighted_conditional_values(values: np.ndarray, weights: np.ndarray,
                                bin_index: np.ndarray, n_bins: Optional[int] = None
                                ) -> ConditionalBinReport:
    """Per-bin self-normalized means plus normalized per-bin weight masses.

    ``weights`` is a raw weight vector (e.g. M at some step); ``bin_index``
    comes from the measure-flow binning.  The normalized per-bin weight means
    let the conditional-martingale identity E[M | bin] = 1 be tested after
    global normalization.
    """
    v = np.asarray(values, float).ravel()
    w = np.asarray(weights, float).ravel()
    b = np.asarray(bin_index).ravel()
    if n_bins is None:
        n_bins = int(b.max()) + 1 if b.size else 0
    counts = np.bincount(b, minlength=n_bins)
    wsum = np.bincount(b, weights=w, minlength=n_bins)
    wvsum = np.bincount(b, weights=w * v, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(wsum > 0, wvsum / wsum, np.nan)
        weight_means = np.where(counts > 0, wsum / np.maximum(counts, 1), np.nan) / w.mean()
    return ConditionalBinReport(bin_means=means, bin_weight_means=weight_means, counts=counts)
