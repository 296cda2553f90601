"""Game instances: coefficients, costs, action box, and Hamiltonian machinery.

Coefficient callables are vectorized over a batch of paths:

    drift(t, x, mu, a)        t scalar, x (n, d_state), a (n, d_action) -> (n, d_state)
    common_drift(t, xc)       xc (n, d_common)                           -> (n, d_common)
    running_cost(t, x, mu, a)                                            -> (n,)
    terminal_cost(x, mu)                                                 -> (n,)

``mu`` is always a :class:`MeasureSummary` (finite support plus cached
moments); the solver never holds any other representation of a measure.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "MeasureSummary",
    "ProblemSpec",
    "ValidationReport",
    "hamiltonian",
    "minimize_hamiltonian",
    "minimize_hamiltonian_batch",
    "box_minimize_batch",
    "validate_spec",
    "make_instance",
    "register_family",
    "point_mass_sampler",
    "truncated_gaussian_sampler",
]

_COND_LIMIT = 1e12
_TIE_TOL = 1e-12


class SingularDiffusionError(ValueError):
    """Raised when a diffusion matrix is numerically singular (cond > 1e12)."""


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------


class MeasureSummary:
    """Finite-support probability measure with cached mean and p-th moment."""

    __slots__ = ("support", "weights", "mean", "pth_moment", "p")

    def __init__(self, support, weights, p: float = 2.0):
        support = np.atleast_2d(np.asarray(support, dtype=float))
        weights = np.asarray(weights, dtype=float).ravel()
        if support.shape[0] != weights.shape[0]:
            raise ValueError("support and weights length mismatch")
        if np.any(weights < 0):
            raise ValueError("negative weights")
        total = weights.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {total!r}, expected 1 within 1e-12")
        self.support = support
        self.weights = weights
        self.p = float(p)
        self.mean = weights @ support
        self.pth_moment = float(weights @ np.linalg.norm(support, axis=1) ** p)

    @classmethod
    def from_atoms(cls, support, weights=None, p: float = 2.0) -> "MeasureSummary":
        support = np.atleast_2d(np.asarray(support, dtype=float))
        if weights is None:
            weights = np.full(support.shape[0], 1.0 / support.shape[0])
        else:
            weights = np.asarray(weights, dtype=float).ravel()
            weights = weights / weights.sum()
        return cls(support, weights, p=p)

    @classmethod
    def dirac(cls, point, p: float = 2.0) -> "MeasureSummary":
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(point[None, :], np.array([1.0]), p=p)

    def moment_check(self) -> bool:
        recomputed = float(self.weights @ np.linalg.norm(self.support, axis=1) ** self.p)
        return abs(recomputed - self.pth_moment) <= 1e-12 * max(1.0, abs(recomputed))


# ---------------------------------------------------------------------------
# game instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemSpec:
    d_state: int
    d_common: int
    d_action: int
    horizon: float
    p: float
    sigma: np.ndarray
    sigma0: np.ndarray
    sigmac: np.ndarray
    action_lo: np.ndarray
    action_hi: np.ndarray
    drift_bound: float
    common_drift_bound: float
    drift: Callable
    common_drift: Callable
    running_cost: Callable
    terminal_cost: Callable
    init_state_sampler: Callable
    init_common_sampler: Callable
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("d_state", "d_common", "d_action"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.p < 2:
            raise ValueError("moment exponent p must be >= 2")
        object.__setattr__(self, "sigma", np.atleast_2d(np.asarray(self.sigma, float)))
        object.__setattr__(self, "sigma0", np.atleast_2d(np.asarray(self.sigma0, float)))
        object.__setattr__(self, "sigmac", np.atleast_2d(np.asarray(self.sigmac, float)))
        lo = np.atleast_1d(np.asarray(self.action_lo, float))
        hi = np.atleast_1d(np.asarray(self.action_hi, float))
        object.__setattr__(self, "action_lo", lo)
        object.__setattr__(self, "action_hi", hi)
        if self.sigma.shape != (self.d_state, self.d_state):
            raise ValueError("sigma must be d_state x d_state")
        if self.sigma0.shape != (self.d_state, self.d_common):
            raise ValueError("sigma0 must be d_state x d_common")
        if self.sigmac.shape != (self.d_common, self.d_common):
            raise ValueError("sigmac must be d_common x d_common")
        if lo.shape != (self.d_action,) or hi.shape != (self.d_action,):
            raise ValueError("action box bounds must have length d_action")
        if np.any(lo > hi):
            raise ValueError("empty action box (lo > hi)")
        # condition numbers recorded at construction; the inverse itself is
        # computed lazily so validate_spec can still report on a singular spec
        object.__setattr__(self, "_cond_sigma", float(np.linalg.cond(self.sigma)))
        object.__setattr__(self, "_cond_sigmac", float(np.linalg.cond(self.sigmac)))
        object.__setattr__(self, "_sigma_inv", None)

    @property
    def cond_sigma(self) -> float:
        return self._cond_sigma

    @property
    def cond_sigmac(self) -> float:
        return self._cond_sigmac

    @property
    def sigma_inv(self) -> np.ndarray:
        cached = self._sigma_inv
        if cached is None:
            if not np.isfinite(self._cond_sigma) or self._cond_sigma > _COND_LIMIT:
                raise SingularDiffusionError(
                    f"sigma is numerically singular (cond={self._cond_sigma:.3g})"
                )
            cached = np.linalg.inv(self.sigma)
            object.__setattr__(self, "_sigma_inv", cached)
        return cached

    def clip_action(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, self.action_lo, self.action_hi)

    def action_in_box(self, a: np.ndarray, tol: float = 1e-9) -> bool:
        a = np.atleast_1d(np.asarray(a, float))
        return bool(np.all(a >= self.action_lo - tol) and np.all(a <= self.action_hi + tol))


# ---------------------------------------------------------------------------
# Hamiltonian and its minimization
# ---------------------------------------------------------------------------


def hamiltonian_batch(spec: ProblemSpec, t: float, x: np.ndarray, mu: MeasureSummary,
                      a: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Reduced Hamiltonian over a path batch: running cost plus z . sigma^-1 drift."""
    b = np.asarray(spec.drift(t, x, mu, a), dtype=float).reshape(x.shape)
    f = np.asarray(spec.running_cost(t, x, mu, a), dtype=float).ravel()
    return f + np.einsum("nk,nk->n", z, b @ spec.sigma_inv.T)


def hamiltonian(spec: ProblemSpec, t: float, x, mu: MeasureSummary, a, z) -> float:
    x = np.atleast_1d(np.asarray(x, float))
    a = np.atleast_1d(np.asarray(a, float))
    z = np.atleast_1d(np.asarray(z, float))
    if not (0.0 <= t <= spec.horizon + 1e-12):
        raise ValueError(f"t={t} outside [0, {spec.horizon}]")
    if not spec.action_in_box(a):
        raise ValueError(f"action {a} outside the action box")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(a)) and np.all(np.isfinite(z))):
        raise ValueError("non-finite input to hamiltonian")
    return float(hamiltonian_batch(spec, t, x[None, :], mu, a[None, :], z[None, :])[0])


_INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0  # 0.618...


def box_minimize_batch(objective: Callable, lo: np.ndarray, hi: np.ndarray, n: int,
                       grid_points: int = 33, gs_iters: int = 40, sweeps: int = 3):
    """Minimize ``objective(a)`` over a box, independently for each of n batch rows.

    ``objective`` maps an (n, d) action array to an (n,) value array.  Coarse
    lexicographically ordered grid scan (first index wins ties within 1e-12),
    then cyclic per-coordinate golden-section refinement around the grid cell.
    Returns (argmin (n, d), value (n,)).
    """
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    d = lo.shape[0]
    axes = [np.linspace(lo[j], hi[j], grid_points) for j in range(d)]
    spacing = np.array([(hi[j] - lo[j]) / (grid_points - 1) if grid_points > 1 else 0.0
                        for j in range(d)])

    candidates = list(itertools.product(*axes))
    vals = np.empty((len(candidates), n))
    for i, cand in enumerate(candidates):
        a = np.tile(np.asarray(cand), (n, 1))
        vals[i] = objective(a)
    min_vals = vals.min(axis=0)
    # first candidate within the tie tolerance; candidates are enumerated in
    # lexicographic order, so this picks the lexicographically smallest action
    pick = np.argmax(vals <= min_vals[None, :] + _TIE_TOL, axis=0)
    best_a = np.asarray(candidates, dtype=float)[pick]
    best_val = vals[pick, np.arange(n)]

    # cyclic coordinate descent over a single coordinate is idempotent after
    # the first sweep; later sweeps only matter when coordinates couple
    effective_sweeps = 1 if d == 1 else sweeps
    for sweep in range(effective_sweeps):
        moved = 0.0
        for j in range(d):
            if spacing[j] <= 0:
                continue
            a_lo = np.maximum(best_a[:, j] - spacing[j], lo[j])
            a_hi = np.minimum(best_a[:, j] + spacing[j], hi[j])
            if np.max(a_hi - a_lo) < 1e-13 * max(1.0, hi[j] - lo[j]):
                continue
            prev = best_a[:, j].copy()
            best_a, best_val = _golden_section_coord(
                objective, best_a, best_val, j, a_lo, a_hi, gs_iters)
            moved = max(moved, float(np.max(np.abs(best_a[:, j] - prev))))
        if sweep > 0 and moved < 1e-10:
            break
    return best_a, best_val


def _golden_section_coord(objective, base_a, base_val, j, a_lo, a_hi, iters):
    def eval_at(coord_vals):
        a = base_a.copy()
        a[:, j] = coord_vals
        return objective(a)

    m1 = a_hi - _INV_GOLDEN * (a_hi - a_lo)
    m2 = a_lo + _INV_GOLDEN * (a_hi - a_lo)
    f1 = eval_at(m1)
    f2 = eval_at(m2)
    for _ in range(iters):
        left = f1 < f2
        hi_new = np.where(left, m2, a_hi)
        lo_new = np.where(left, a_lo, m1)
        m1_new = np.where(left, hi_new - _INV_GOLDEN * (hi_new - lo_new), m2)
        m2_new = np.where(left, m1, lo_new + _INV_GOLDEN * (hi_new - lo_new))
        probe = np.where(left, m1_new, m2_new)
        f_probe = eval_at(probe)
        f1, f2 = np.where(left, f_probe, f2), np.where(left, f1, f_probe)
        a_lo, a_hi, m1, m2 = lo_new, hi_new, m1_new, m2_new
    cand = np.where(f1 < f2, m1, m2)
    cand_val = np.minimum(f1, f2)
    improved = cand_val < base_val
    out_a = base_a.copy()
    out_a[improved, j] = cand[improved]
    out_val = np.where(improved, cand_val, base_val)
    return out_a, out_val


def minimize_hamiltonian_batch(spec: ProblemSpec, t: float, x: np.ndarray,
                               mu: MeasureSummary, z: np.ndarray,
                               grid_points: int = 33, gs_iters: int = 40,
                               sweeps: int = 3):
    """Vectorized Hamiltonian minimization; returns (actions (n, d_action), values (n,))."""
    n = x.shape[0]

    def objective(a):
        return hamiltonian_batch(spec, t, x, mu, a, z)

    return box_minimize_batch(objective, spec.action_lo, spec.action_hi, n,
                              grid_points=grid_points, gs_iters=gs_iters, sweeps=sweeps)


def minimize_hamiltonian(spec: ProblemSpec, t: float, x, mu: MeasureSummary, z):
    """Minimizer of the reduced Hamiltonian at one point; returns (action, value)."""
    x = np.atleast_1d(np.asarray(x, float))
    z = np.atleast_1d(np.asarray(z, float))
    if not (0.0 <= t <= spec.horizon + 1e-12):
        raise ValueError(f"t={t} outside [0, {spec.horizon}]")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
        raise ValueError("non-finite input to minimize_hamiltonian")
    a, v = minimize_hamiltonian_batch(spec, t, x[None, :], mu, z[None, :])
    return a[0], float(v[0])


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    n_probes: int
    max_drift: float
    max_common_drift: float
    cond_sigma: float
    cond_sigmac: float
    drift_ok: bool
    common_drift_ok: bool
    sigma_ok: bool
    sigmac_ok: bool
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.drift_ok and self.common_drift_ok and self.sigma_ok and self.sigmac_ok

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"validation: {status} ({self.n_probes} probes)",
            f"  max |drift| = {self.max_drift:.6g} (bound ok: {self.drift_ok})",
            f"  max |common drift| = {self.max_common_drift:.6g} (bound ok: {self.common_drift_ok})",
            f"  cond(sigma) = {self.cond_sigma:.6g} (ok: {self.sigma_ok})",
            f"  cond(sigmac) = {self.cond_sigmac:.6g} (ok: {self.sigmac_ok})",
        ]
        lines.extend("  note: " + n for n in self.notes)
        return "\n".join(lines)


def validate_spec(spec: ProblemSpec, n_probes: int = 256, seed: int = 0) -> ValidationReport:
    """Sample-based check of the declared drift bounds and diffusion invertibility."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    notes = []

    # probe actions: uniform over the box plus all box corners
    corners = list(itertools.product(*zip(spec.action_lo, spec.action_hi)))[:64]
    a_probes = rng.uniform(spec.action_lo, spec.action_hi, size=(n_probes, spec.d_action))
    a_probes = np.vstack([a_probes, np.asarray(corners, float)])
    m = a_probes.shape[0]
    t_probes = rng.uniform(0.0, spec.horizon, size=m)
    x_probes = rng.normal(0.0, 3.0, size=(m, spec.d_state))
    xc_probes = rng.normal(0.0, 3.0, size=(m, spec.d_common))
    mu_atoms = rng.normal(0.0, 2.0, size=(8, spec.d_state))
    mu = MeasureSummary.from_atoms(mu_atoms, p=spec.p)

    max_drift = 0.0
    max_common = 0.0
    for i in range(m):
        b = np.asarray(spec.drift(t_probes[i], x_probes[i : i + 1], mu, a_probes[i : i + 1]), float)
        bc = np.asarray(spec.common_drift(t_probes[i], xc_probes[i : i + 1]), float)
        if not np.all(np.isfinite(b)) or not np.all(np.isfinite(bc)):
            notes.append(f"non-finite drift at probe {i}")
            max_drift = np.inf
            break
        max_drift = max(max_drift, float(np.linalg.norm(b)))
        max_common = max(max_common, float(np.linalg.norm(bc)))

    drift_ok = max_drift <= spec.drift_bound + 1e-9
    common_ok = max_common <= spec.common_drift_bound + 1e-9
    sigma_ok = np.isfinite(spec.cond_sigma) and spec.cond_sigma <= _COND_LIMIT
    sigmac_ok = np.isfinite(spec.cond_sigmac) and spec.cond_sigmac <= _COND_LIMIT
    if not sigma_ok:
        notes.append("singular sigma")
    if not sigmac_ok:
        notes.append("singular sigmac")
    if not drift_ok and np.isfinite(max_drift):
        notes.append(f"drift bound {spec.drift_bound} violated: observed {max_drift:.6g}")
    return ValidationReport(
        n_probes=m, max_drift=max_drift, max_common_drift=max_common,
        cond_sigma=spec.cond_sigma, cond_sigmac=spec.cond_sigmac,
        drift_ok=drift_ok, common_drift_ok=common_ok,
        sigma_ok=sigma_ok, sigmac_ok=sigmac_ok, notes=notes,
    )


# ---------------------------------------------------------------------------
# initial-condition samplers
# ---------------------------------------------------------------------------


def point_mass_sampler(value, dim: int = 1):
    value = np.broadcast_to(np.atleast_1d(np.asarray(value, float)), (dim,)).copy()

    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return np.tile(value, (n, 1))

    return sample


def truncated_gaussian_sampler(mean=0.0, std=1.0, clip: float = 3.0, dim: int = 1):
    """Gaussian clipped at mean +- clip*std, so every moment bound holds trivially."""
    mean = np.broadcast_to(np.atleast_1d(np.asarray(mean, float)), (dim,))
    std = np.broadcast_to(np.atleast_1d(np.asarray(std, float)), (dim,))

    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        draws = rng.normal(0.0, 1.0, size=(n, dim))
        return mean + std * np.clip(draws, -clip, clip)

    return sample


# ---------------------------------------------------------------------------
# built-in instance families
# ---------------------------------------------------------------------------


def _make_lq(action_weight: float = 1.0, state_weight: float = 3.0,
             terminal_weight: float = 1.0, interaction: float = 2.5,
             sigma: float = 1.0, sigma0: float = 0.5, sigmac: float = 1.0,
             horizon: float = 1.0, action_lo: float = -1.0, action_hi: float = 1.0,
             init_mean: float = 0.0, init_std: float = 0.5, init_clip: float = 3.0,
             common_init: float = 0.0, common_init_std: float = 0.0,
             p: float = 2.0) -> ProblemSpec:
    """Linear-quadratic family: drift = action, quadratic costs in (a, x - w*mean).

    Default weights give a fixed point the damped iteration genuinely has to
    work for (several iterations at desk scale) while staying contractive.
    """
    w = float(interaction)
    ca, cx, cg = float(action_weight), float(state_weight), float(terminal_weight)

    def drift(t, x, mu, a):
        return a

    def common_drift(t, xc):
        return np.zeros_like(xc)

    def running_cost(t, x, mu, a):
        dev = x[:, 0] - w * mu.mean[0]
        return 0.5 * ca * a[:, 0] ** 2 + 0.5 * cx * dev ** 2

    def terminal_cost(x, mu):
        dev = x[:, 0] - w * mu.mean[0]
        return 0.5 * cg * dev ** 2

    if common_init_std > 0:
        common_sampler = truncated_gaussian_sampler(common_init, common_init_std, dim=1)
    else:
        common_sampler = point_mass_sampler(common_init, dim=1)
    return ProblemSpec(
        d_state=1, d_common=1, d_action=1,
        horizon=float(horizon), p=float(p),
        sigma=[[float(sigma)]], sigma0=[[float(sigma0)]], sigmac=[[float(sigmac)]],
        action_lo=[float(action_lo)], action_hi=[float(action_hi)],
        drift_bound=max(abs(float(action_lo)), abs(float(action_hi))),
        common_drift_bound=0.0,
        drift=drift, common_drift=common_drift,
        running_cost=running_cost, terminal_cost=terminal_cost,
        init_state_sampler=truncated_gaussian_sampler(init_mean, init_std, clip=init_clip, dim=1),
        init_common_sampler=common_sampler,
        family="lq",
        params=dict(action_weight=ca, state_weight=cx, terminal_weight=cg,
                    interaction=w, sigma=float(sigma), sigma0=float(sigma0),
                    sigmac=float(sigmac), horizon=float(horizon),
                    action_lo=float(action_lo), action_hi=float(action_hi),
                    init_mean=float(init_mean), init_std=float(init_std),
                    init_clip=float(init_clip), common_init=float(common_init),
                    common_init_std=float(common_init_std), p=float(p)),
    )


def _make_tanh(gain: float = 0.5, cost_weight: float = 1.0, interaction: float = 1.0,
               sigma: float = 1.0, sigma0: float = 0.5, sigmac: float = 1.0,
               horizon: float = 1.0, action_lo: float = -1.0, action_hi: float = 1.0,
               init_mean: float = 0.0, init_std: float = 0.5, init_clip: float = 3.0,
               common_init: float = 0.0, common_init_std: float = 0.0,
               p: float = 2.0) -> ProblemSpec:
    """Saturating-drift family with costs that are nonsmooth in the measure argument."""
    g0 = float(gain)
    cw = float(cost_weight)
    w = float(interaction)

    def drift(t, x, mu, a):
        return g0 * np.tanh(x) + a

    def common_drift(t, xc):
        return np.zeros_like(xc)

    def running_cost(t, x, mu, a):
        return 0.5 * a[:, 0] ** 2 + cw * np.abs(x[:, 0] - w * mu.mean[0])

    def terminal_cost(x, mu):
        return cw * np.abs(x[:, 0] - w * mu.mean[0])

    if common_init_std > 0:
        common_sampler = truncated_gaussian_sampler(common_init, common_init_std, dim=1)
    else:
        common_sampler = point_mass_sampler(common_init, dim=1)
    box_rad = max(abs(float(action_lo)), abs(float(action_hi)))
    return ProblemSpec(
        d_state=1, d_common=1, d_action=1,
        horizon=float(horizon), p=float(p),
        sigma=[[float(sigma)]], sigma0=[[float(sigma0)]], sigmac=[[float(sigmac)]],
        action_lo=[float(action_lo)], action_hi=[float(action_hi)],
        drift_bound=abs(g0) + box_rad, common_drift_bound=0.0,
        drift=drift, common_drift=common_drift,
        running_cost=running_cost, terminal_cost=terminal_cost,
        init_state_sampler=truncated_gaussian_sampler(init_mean, init_std, clip=init_clip, dim=1),
        init_common_sampler=common_sampler,
        family="tanh",
        params=dict(gain=g0, cost_weight=cw, interaction=w, sigma=float(sigma),
                    sigma0=float(sigma0), sigmac=float(sigmac), horizon=float(horizon),
                    action_lo=float(action_lo), action_hi=float(action_hi),
                    init_mean=float(init_mean), init_std=float(init_std),
                    init_clip=float(init_clip), common_init=float(common_init),
                    common_init_std=float(common_init_std), p=float(p)),
    )


_FAMILIES: dict[str, Callable[..., ProblemSpec]] = {
    "lq": _make_lq,
    "tanh": _make_tanh,
}


def register_family(name: str, builder: Callable[..., ProblemSpec]) -> None:
    _FAMILIES[name] = builder


def make_instance(family: str, **params) -> ProblemSpec:
    try:
        builder = _FAMILIES[family]
    except KeyError:
        known = ", ".join(sorted(_FAMILIES))
        raise ValueError(f"unknown instance family {family!r} (known: {known})") from None
    return builder(**params)
