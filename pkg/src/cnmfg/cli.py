"""Command-line entry points, config parsing, CSV emission, run manifests.

Config files are flat key = value text with [problem], [solver] and [output]
sections; unknown keys are rejected with the offending line number.  Data CSVs
are byte-reproducible for a fixed (config, seeds); wall-clock numbers are
quarantined in the manifest.
"""

from __future__ import annotations

import argparse
import csv
import inspect
import os
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bsde import policy_to_csv, solve_bsde
from .equilibrium import (
    SolverConfig,
    apply_phi,
    exploitability,
    initial_flow,
    solve_equilibrium,
)
from .flows import EmpiricalMeasure, flow_to_csv, lp_transport, wasserstein_1d
from .problem import ProblemSpec, make_instance, validate_spec, _FAMILIES
from .projection import lagged_noise_control, mimicking_check, project_cost_gap, project_control
from .sde import generate_noise, simulate_driftless_state

__all__ = ["ConfigError", "parse_config", "run_command", "main"]

_FMT = "%.17g"


class ConfigError(ValueError):
    pass


_SOLVER_KEYS = {
    "paths": ("n_paths", int),
    "steps": ("n_steps", int),
    "bins": ("n_bins", int),
    "min_bin_count": ("min_bin_count", int),
    "degree": ("basis_degree", int),
    "ridge": ("ridge", float),
    "damping": ("damping", float),
    "max_iters": ("max_iters", int),
    "tol": ("tol", float),
    "order": ("flow_order", float),
    "seed": ("seed", int),
    "eval_seed": ("eval_seed", int),
    "threads": ("threads", int),
    "retained_eval_paths": ("retained_eval_paths", int),
    "partition": ("partition_times", "times"),
}

_OUTPUT_KEYS = {"out_dir"}


def _parse_number(raw: str, kind, path, lineno):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "times":
            return tuple(float(tok) for tok in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: malformed number {raw!r}") from None
    raise ConfigError(f"{path}:{lineno}: unsupported value kind")


def parse_config(path):
    """Parse a config file into (ProblemSpec, SolverConfig, output options)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    section = None
    problem_kv: dict = {}
    solver_kv: dict = {}
    output_kv: dict = {}
    lines_for: dict = {}
    for lineno, raw_line in enumerate(path.read_text().splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("problem", "solver", "output"):
                raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key outside any section")
        key, raw = (tok.strip() for tok in line.split("=", 1))
        target = {"problem": problem_kv, "solver": solver_kv, "output": output_kv}[section]
        if key in target:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        target[key] = raw
        lines_for[(section, key)] = lineno

    family = problem_kv.pop("family", None)
    if family is None:
        raise ConfigError(f"{path}: missing required key 'family' in [problem]")
    if family not in _FAMILIES:
        lineno = lines_for.get(("problem", "family"), 0)
        known = ", ".join(sorted(_FAMILIES))
        raise ConfigError(f"{path}:{lineno}: unknown family {family!r} (known: {known})")
    allowed = set(inspect.signature(_FAMILIES[family]).parameters)
    problem_params = {}
    for key, raw in problem_kv.items():
        lineno = lines_for[("problem", key)]
        if key not in allowed:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} for family {family!r}")
        problem_params[key] = _parse_number(raw, float, path, lineno)
    spec = make_instance(family, **problem_params)

    solver_params = {}
    for key, raw in solver_kv.items():
        lineno = lines_for[("solver", key)]
        if key not in _SOLVER_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown solver key {key!r}")
        name, kind = _SOLVER_KEYS[key]
        solver_params[name] = _parse_number(raw, kind, path, lineno)
    try:
        config = SolverConfig(**solver_params)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    outputs = {}
    for key, raw in output_kv.items():
        lineno = lines_for[("output", key)]
        if key not in _OUTPUT_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown output key {key!r}")
        outputs[key] = raw
    return spec, config, outputs


def _apply_overrides(config: SolverConfig, args) -> SolverConfig:
    fields = {}
    for attr, name in (("seed", "seed"), ("paths", "n_paths"), ("steps", "n_steps"),
                       ("bins", "n_bins"), ("damping", "damping"),
                       ("max_iters", "max_iters"), ("tol", "tol"), ("threads", "threads")):
        val = getattr(args, attr, None)
        if val is not None:
            fields[name] = val
    # worker-count env var honoured only when the flag is absent; results never
    # depend on it either way (fixed-order reductions)
    if getattr(args, "threads", None) is None and os.environ.get("CNMFG_THREADS"):
        try:
            fields["threads"] = int(os.environ["CNMFG_THREADS"])
        except ValueError:
            pass
    if not fields:
        return config
    kv = {f: getattr(config, f) for f in (
        "n_paths", "n_steps", "n_bins", "min_bin_count", "basis_degree", "ridge",
        "damping", "max_iters", "tol", "flow_order", "seed", "eval_seed",
        "partition_times", "retained_eval_paths", "threads")}
    kv.update(fields)
    if "seed" in fields and "eval_seed" not in fields:
        kv["eval_seed"] = None   # re-derive from the new seed
    return SolverConfig(**kv)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else _FMT % v for v in row])


def _write_manifest(path: Path, spec: ProblemSpec, config: SolverConfig,
                    extra: dict) -> None:
    kv = {
        "cnmfg_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "python_version": sys.version.split()[0],
        "problem.family": spec.family,
    }
    for key, val in sorted(spec.params.items()):
        kv[f"problem.{key}"] = repr(val)
    for f in ("n_paths", "n_steps", "n_bins", "min_bin_count", "basis_degree", "ridge",
              "damping", "max_iters", "tol", "flow_order", "seed", "eval_seed",
              "partition_times", "retained_eval_paths", "threads"):
        kv[f"solver.{f}"] = repr(getattr(config, f))
    kv.update({k: repr(v) for k, v in extra.items()})
    with open(path, "w") as fh:
        for key in sorted(kv):
            fh.write(f"{key} = {kv[key]}\n")


def _out_dir(args, outputs) -> Path:
    out = args.out_dir or outputs.get("out_dir") or "run_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_validate(spec, config, args, outputs) -> int:
    report = validate_spec(spec, n_probes=512, seed=config.seed)
    print(report.summary())
    return 0 if report.passed else 1


def _cmd_solve(spec, config, args, outputs) -> int:
    out = _out_dir(args, outputs)
    t0 = time.perf_counter()
    result = solve_equilibrium(spec, config)
    eps, eps_se = exploitability(spec, result.flow, result.policy, config)
    total_ms = (time.perf_counter() - t0) * 1e3
    _write_csv(out / "residuals.csv", ["iter", "residual", "y0", "damping"],
               [(str(r.iteration), r.residual, r.y0, r.damping) for r in result.report.rows])
    _write_csv(out / "bsde_residuals.csv", ["step", "residual_var"],
               [(str(k), v) for k, v in enumerate(result.solution.residual_var)])
    flow_to_csv(result.flow, out / "flow.csv")
    policy_to_csv(result.projected_policy, out / "policy.csv")
    _write_csv(out / "mimicking.csv", ["step", "t", "w1"],
               [(str(int(k)), result.flow.grid.times[int(k)], w)
                for k, w in zip(result.mimicking.steps, result.mimicking.w1)])
    _write_manifest(out / "manifest.txt", spec, config, {
        "status": result.report.status,
        "iterations": len(result.report.rows),
        "final_residual": result.report.rows[-1].residual if result.report.rows else None,
        "y0": result.solution.y0,
        "exploitability": eps,
        "exploitability_stderr": eps_se,
        "mimicking_max_w1": result.mimicking.max_w1,
        "wall_ms_total": total_ms,
        "wall_ms_per_iter": [round(r.wall_ms, 3) for r in result.report.rows],
    })
    print(f"status={result.report.status} iterations={len(result.report.rows)} "
          f"residual={result.report.rows[-1].residual:.6g} y0={result.solution.y0:.6g} "
          f"exploitability={eps:.6g}")
    return 0 if result.report.converged else 2


def _cmd_phi(spec, config, args, outputs) -> int:
    out = _out_dir(args, outputs)
    t0 = time.perf_counter()
    m0 = initial_flow(spec, config)
    phi = apply_phi(spec, m0, config)
    total_ms = (time.perf_counter() - t0) * 1e3
    flow_to_csv(phi.flow, out / "flow.csv")
    _write_csv(out / "bsde_residuals.csv", ["step", "residual_var"],
               [(str(k), v) for k, v in enumerate(phi.solution.residual_var)])
    _write_manifest(out / "manifest.txt", spec, config, {
        "y0": phi.solution.y0, "y0_stderr": phi.solution.y0_stderr,
        "wall_ms_total": total_ms,
    })
    print(f"y0={phi.solution.y0:.6g} (stderr {phi.solution.y0_stderr:.2g})")
    return 0


def _cmd_bsde_check(spec, config, args, outputs) -> int:
    out = _out_dir(args, outputs)
    t0 = time.perf_counter()
    grid = config.grid(spec)
    noise = generate_noise(config.n_paths, grid, config.seed,
                           d_state=spec.d_state, d_common=spec.d_common)
    paths = simulate_driftless_state(spec, noise)
    m0 = initial_flow(spec, config, paths)
    basis = config.basis()
    zero = solve_bsde(spec, m0, paths, noise, basis, driver="zero", store_actions=False)
    full = solve_bsde(spec, m0, paths, noise, basis)
    from .bsde import _terminal_values
    g_term = _terminal_values(spec, m0, paths)
    total_ms = (time.perf_counter() - t0) * 1e3
    _write_csv(out / "bsde_check.csv", ["step", "residual_var_zero", "residual_var"],
               [(str(k), zero.residual_var[k], full.residual_var[k])
                for k in range(grid.n_steps)])
    martingale_gap = abs(zero.y0 - float(g_term.mean()))
    _write_manifest(out / "manifest.txt", spec, config, {
        "y0_zero_driver": zero.y0,
        "terminal_mean": float(g_term.mean()),
        "martingale_gap": martingale_gap,
        "martingale_gap_se": zero.y0_stderr,
        "y0": full.y0,
        "wall_ms_total": total_ms,
    })
    print(f"zero-driver y0={zero.y0:.6g} vs E[terminal]={g_term.mean():.6g} "
          f"(gap {martingale_gap:.3g}); driver y0={full.y0:.6g}")
    return 0


def _cmd_w1_oracle(spec, config, args, outputs) -> int:
    out = _out_dir(args, outputs)
    rng = np.random.default_rng(config.seed)
    rows = []
    worst = 0.0
    t0 = time.perf_counter()
    for case in range(200):
        na, nb = rng.integers(1, 11, size=2)
        mu = EmpiricalMeasure(rng.normal(0, 2, size=(na, 1)), rng.random(na) + 0.05)
        nu = EmpiricalMeasure(rng.normal(0, 2, size=(nb, 1)), rng.random(nb) + 0.05)
        for q in (1.0, 2.0):
            a = wasserstein_1d(mu, nu, q)
            b = lp_transport(mu, nu, q)
            worst = max(worst, abs(a - b))
            rows.append((str(case), _FMT % q, a, b, abs(a - b)))
    total_ms = (time.perf_counter() - t0) * 1e3
    _write_csv(out / "w1_oracle.csv", ["case", "q", "quantile", "lp", "absdiff"], rows)
    _write_manifest(out / "manifest.txt", spec, config,
                    {"max_absdiff": worst, "wall_ms_total": total_ms})
    print(f"max |quantile - lp| = {worst:.3g} over 200 cases x q in (1, 2)")
    return 0 if worst <= 1e-9 else 1


def _cmd_mimic_check(spec, config, args, outputs) -> int:
    out = _out_dir(args, outputs)
    t0 = time.perf_counter()
    grid = config.grid(spec)
    noise = generate_noise(config.n_paths, grid, config.seed,
                           d_state=spec.d_state, d_common=spec.d_common)
    paths = simulate_driftless_state(spec, noise)
    flow = initial_flow(spec, config, paths)
    actions = lagged_noise_control(spec, noise)
    from .bsde import objective_influence
    _, _, _, weights = objective_influence(spec, flow, actions, paths, noise)
    policy = project_control(spec, paths, actions, flow, weights, config.basis())
    fresh = generate_noise(config.n_paths, grid, config.eval_seed,
                           d_state=spec.d_state, d_common=spec.d_common)
    report = mimicking_check(spec, (paths, weights), policy, flow, fresh)
    gap, gap_se = project_cost_gap(spec, paths, actions, policy, flow, weights, noise)
    total_ms = (time.perf_counter() - t0) * 1e3
    _write_csv(out / "mimicking.csv", ["step", "t", "w1"],
               [(str(int(k)), grid.times[int(k)], w) for k, w in zip(report.steps, report.w1)])
    _write_manifest(out / "manifest.txt", spec, config, {
        "max_w1": report.max_w1, "mean_w1": report.mean_w1,
        "cost_gap": gap, "cost_gap_stderr": gap_se,
        "clamp_count": report.clamp_count, "wall_ms_total": total_ms,
    })
    print(f"mimicking: max W1 = {report.max_w1:.4g}, mean = {report.mean_w1:.4g}; "
          f"cost gap = {gap:.4g} (se {gap_se:.2g})")
    return 0


_COMMANDS = {
    "solve": _cmd_solve,
    "phi": _cmd_phi,
    "bsde-check": _cmd_bsde_check,
    "w1-oracle": _cmd_w1_oracle,
    "mimic-check": _cmd_mimic_check,
    "validate": _cmd_validate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnmfg")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--paths", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--bins", type=int)
        p.add_argument("--damping", type=float)
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--tol", type=float)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--threads", type=int)
    return parser


def run_command(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        spec, config, outputs = parse_config(args.config)
        config = _apply_overrides(config, args)
        return _COMMANDS[args.command](spec, config, args, outputs)
    except (ConfigError, ValueError, RuntimeError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))
