"""Path simulation on a shared time grid.

Brownian increments come from Philox counter streams keyed by
(seed, fixed-size path chunk), with fixed-consumption Box-Muller sampling, so
every (path, step, coordinate) triple occupies a non-overlapping substream.
Output never depends on how work is scheduled across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .problem import ProblemSpec

__all__ = [
    "TimeGrid",
    "NoiseBundle",
    "PathBundle",
    "generate_noise",
    "simulate_common_state",
    "simulate_driftless_state",
    "simulate_markov_sde",
]

_CHUNK = 4096          # paths per Philox key; fixed so chunking never depends on workers
_STREAM_NOISE = 0
_STREAM_STATE_INIT = 1
_STREAM_COMMON_INIT = 2
_TWO53 = float(1 << 53)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def nearest_step(self, t: float) -> int:
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps or abs(t - k * self.dt) > 0.5 * self.dt + 1e-12:
            raise ValueError(f"t={t} is not within dt/2 of a grid point")
        return k


@dataclass(frozen=True)
class NoiseBundle:
    grid: TimeGrid
    seed: int
    dw: np.ndarray    # (n_paths, n_steps, d_state)
    dw0: np.ndarray   # (n_paths, n_steps, d_common)

    @property
    def n_paths(self) -> int:
        return self.dw.shape[0]


@dataclass
class PathBundle:
    grid: TimeGrid
    x: np.ndarray     # (n_paths, n_steps + 1, d_state)
    xc: np.ndarray    # (n_paths, n_steps + 1, d_common)
    label: str
    clamp_count: int = 0

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]


def _philox_key(seed: int, stream: int, chunk: int) -> int:
    return ((int(seed) % (1 << 64)) << 64) | ((stream & 0x7) << 48) | (chunk & 0xFFFFFFFFFFFF)


def _stream_generator(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_philox_key(seed, stream, 0)))


def _chunk_normals(seed: int, stream: int, chunk: int, n_rows: int, n_per_row: int) -> np.ndarray:
    """Fixed-consumption standard normals: one Philox raw pair per Box-Muller pair."""
    pairs = (n_per_row + 1) // 2
    bg = np.random.Philox(key=_philox_key(seed, stream, chunk))
    raw = bg.random_raw(n_rows * pairs * 2).reshape(n_rows, pairs, 2)
    u1 = ((raw[:, :, 0] >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53   # (0, 1]
    u2 = (raw[:, :, 1] >> np.uint64(11)).astype(np.float64) / _TWO53           # [0, 1)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * np.pi) * u2
    out = np.empty((n_rows, 2 * pairs))
    out[:, 0::2] = r * np.cos(theta)
    out[:, 1::2] = r * np.sin(theta)
    return out[:, :n_per_row]


def generate_noise(n_paths: int, grid: TimeGrid, seed: int,
                   d_state: int = 1, d_common: int = 1) -> NoiseBundle:
    """Brownian increments N(0, dt) for (W, W0), bitwise reproducible from the seed."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    n_per_row = grid.n_steps * (d_state + d_common)
    normals = np.empty((n_paths, n_per_row))
    for chunk, start in enumerate(range(0, n_paths, _CHUNK)):
        stop = min(start + _CHUNK, n_paths)
        normals[start:stop] = _chunk_normals(seed, _STREAM_NOISE, chunk, stop - start, n_per_row)
    normals = normals.reshape(n_paths, grid.n_steps, d_state + d_common)
    sqdt = np.sqrt(grid.dt)
    dw = np.ascontiguousarray(normals[:, :, :d_state]) * sqdt
    dw0 = np.ascontiguousarray(normals[:, :, d_state:]) * sqdt
    if n_paths >= 10_000:
        _increment_sanity_check(dw, grid.dt, "dW")
        _increment_sanity_check(dw0, grid.dt, "dW0")
    return NoiseBundle(grid=grid, seed=int(seed), dw=dw, dw0=dw0)


def _increment_sanity_check(arr: np.ndarray, dt: float, name: str) -> None:
    n = arr.size
    se_mean = np.sqrt(dt / n)
    se_var = dt * np.sqrt(2.0 / n)
    mean = arr.mean()
    var = arr.var()
    if abs(mean) > 4 * se_mean or abs(var - dt) > 4 * se_var:
        import warnings

        warnings.warn(f"{name} increment statistics failed the sanity check: "
                      f"mean {mean:.3g} ({abs(mean) / se_mean:.1f} s.e.), "
                      f"var {var:.6g} vs dt {dt:.6g}")


def draw_initial_states(spec: ProblemSpec, noise: NoiseBundle):
    """Initial (state, common) draws; fixed per (seed, sampler), shared by all simulators."""
    n = noise.n_paths
    x0 = np.asarray(spec.init_state_sampler(_stream_generator(noise.seed, _STREAM_STATE_INIT), n), float)
    xc0 = np.asarray(spec.init_common_sampler(_stream_generator(noise.seed, _STREAM_COMMON_INIT), n), float)
    if x0.shape != (n, spec.d_state):
        raise ValueError(f"init_state_sampler returned shape {x0.shape}, expected {(n, spec.d_state)}")
    if xc0.shape != (n, spec.d_common):
        raise ValueError(f"init_common_sampler returned shape {xc0.shape}, expected {(n, spec.d_common)}")
    return x0, xc0


def simulate_common_state(spec: ProblemSpec, noise: NoiseBundle) -> np.ndarray:
    """Euler scheme for the common state driven by W0; returns (n, n_steps+1, d_common)."""
    grid = noise.grid
    n = noise.n_paths
    _, xc0 = draw_initial_states(spec, noise)
    xc = np.empty((n, grid.n_steps + 1, spec.d_common))
    xc[:, 0] = xc0
    dt = grid.dt
    times = grid.times
    sigmac_t = spec.sigmac.T
    for k in range(grid.n_steps):
        bc = np.asarray(spec.common_drift(times[k], xc[:, k]), float)
        if not np.all(np.isfinite(bc)):
            bad = int(np.argwhere(~np.isfinite(bc))[0][0])
            raise RuntimeError(f"non-finite common drift at step {k}, path {bad}")
        xc[:, k + 1] = xc[:, k] + bc * dt + noise.dw0[:, k] @ sigmac_t
    return xc


def simulate_driftless_state(spec: ProblemSpec, noise: NoiseBundle,
                             xc: Optional[np.ndarray] = None) -> PathBundle:
    """Reference-measure state: initial draw plus pure diffusion, no drift term."""
    grid = noise.grid
    if xc is None:
        xc = simulate_common_state(spec, noise)
    x0, _ = draw_initial_states(spec, noise)
    incr = noise.dw @ spec.sigma.T + noise.dw0 @ spec.sigma0.T
    x = np.empty((noise.n_paths, grid.n_steps + 1, spec.d_state))
    x[:, 0] = x0
    # sequential accumulation, matching the controlled simulator exactly when
    # the drift vanishes
    for k in range(grid.n_steps):
        x[:, k + 1] = x[:, k] + incr[:, k]
    return PathBundle(grid=grid, x=x, xc=xc, label="driftless")


def simulate_markov_sde(spec: ProblemSpec, policy, flow, noise: NoiseBundle,
                        xc: Optional[np.ndarray] = None) -> PathBundle:
    """Controlled state under a Markovian feedback policy and a conditional measure flow.

    ``policy`` exposes ``actions(k, x, xc, key)``; ``flow`` exposes
    ``key_index(k)``, ``assign(k, keys)`` and ``summary(k, bin)``.  Actions
    falling outside the box are clamped and counted.
    """
    grid = noise.grid
    if grid.n_steps != flow.grid.n_steps or abs(grid.horizon - flow.grid.horizon) > 1e-12:
        raise ValueError("policy/flow grid does not match the noise grid")
    if xc is None:
        xc = simulate_common_state(spec, noise)
    x0, _ = draw_initial_states(spec, noise)
    n = noise.n_paths
    x = np.empty((n, grid.n_steps + 1, spec.d_state))
    x[:, 0] = x0
    dt = grid.dt
    times = grid.times
    sigma_t = spec.sigma.T
    sigma0_t = spec.sigma0.T
    clamped = 0
    for k in range(grid.n_steps):
        keys = xc[:, flow.key_index(k), 0]
        a = np.asarray(policy.actions(k, x[:, k], xc[:, k], keys), float)
        outside = (a < spec.action_lo - 1e-12) | (a > spec.action_hi + 1e-12)
        clamped += int(np.count_nonzero(outside.any(axis=1)))
        a = spec.clip_action(a)
        bins = flow.assign(k, keys)
        b = np.empty((n, spec.d_state))
        for bin_idx in np.unique(bins):
            sel = bins == bin_idx
            mu = flow.summary(k, int(bin_idx))
            b[sel] = np.asarray(spec.drift(times[k], x[sel, k], mu, a[sel]), float)
        if not np.all(np.isfinite(b)):
            bad = int(np.argwhere(~np.isfinite(b))[0][0])
            raise RuntimeError(f"non-finite controlled drift at step {k}, path {bad}")
        # grouping matches the driftless simulator so a zero drift reproduces
        # its paths bitwise
        x[:, k + 1] = (x[:, k] + b * dt) + (noise.dw[:, k] @ sigma_t + noise.dw0[:, k] @ sigma0_t)
    return PathBundle(grid=grid, x=x, xc=xc, label="markov", clamp_count=clamped)
