"""Command-line entry point.

    robust-stackelberg <subcommand> --spec <path> --out <dir> [--seed N] [--scale {desk,small}]

Subcommands: follower, leader, full, observability, check.  Exit codes: 0
success, 1 invalid input, 2 solver non-convergence, 3 internal error or failed
invariant check.
"""

from __future__ import annotations

import argparse
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .carleman import default_weights, empirical_observability_constant
from .checks import run_suite
from .config import ProblemSpec, default_spec, load_spec
from .errors import ConvergenceError, DomainError, GeometryError, GridMismatchError, SpecError
from .fixed_point import solve_projected_hierarchy, solve_semilinear_hierarchy
from .follower import solve_saddle_direct, solve_saddle_projected
from .leader import epsilon_sweep, minimize_F_eps
from .mesh import Grid, SpaceTimeField, norm_Omega

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_INTERNAL = 0, 1, 2, 3
SUBCOMMANDS = ("follower", "leader", "full", "observability", "check")


@dataclass
class RunRecord:
    subcommand: str
    spec_hash: str
    seed: int
    scale: str
    timings: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    error: str | None = None

    def stage(self, name):
        record = self

        class _Timer:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                record.timings[name] = time.perf_counter() - self.start
                return False

        return _Timer()

    def write(self, out: Path) -> None:
        lines = [
            f"subcommand: {self.subcommand}",
            f"spec_hash: {self.spec_hash}",
            f"seed: {self.seed}",
            f"scale: {self.scale}",
            f"version: {__version__}",
        ]
        lines += [f"summary.{k}: {_fmt(v)}" for k, v in self.summary.items()]
        lines += [f"time.{k}: {v:.3f} s" for k, v in self.timings.items()]
        lines += [f"flag: {f}" for f in self.flags]
        lines += [f"output: {o}" for o in self.outputs]
        if self.error:
            lines.append(f"error: {self.error}")
        (out / "run_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan (undefined)" if np.isnan(value) else f"{value:.10g}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return str(value)


# ---------------------------------------------------------------------- CSV output


def _write_csv(path: Path, header: list, rows: np.ndarray, spec_hash: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# spec_hash={spec_hash}\n")
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, np.atleast_2d(rows), fmt="%.17g", delimiter=",")


def _long_format(grid: Grid, *fields_) -> np.ndarray:
    tt, xx = np.meshgrid(grid.t, grid.x, indexing="ij")
    cols = [tt.ravel(), xx.ravel()] + [f.values.ravel() for f in fields_]
    return np.column_stack(cols)


def write_trajectory(path: Path, grid: Grid, name: str, f: SpaceTimeField, spec_hash: str) -> None:
    _write_csv(path, ["t", "x", name], _long_format(grid, f), spec_hash)


def read_trajectory(path: Path, grid: Grid) -> SpaceTimeField:
    """Read a long-format (t, x, value) CSV written by this tool back onto ``grid``."""
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=2, ndmin=2)
    if data.shape[0] != grid.shape[0] * grid.shape[1]:
        raise GridMismatchError(f"{path} holds {data.shape[0]} rows, grid needs {grid.shape[0] * grid.shape[1]}")
    expected = _long_format(grid, grid.zeros())[:, :2]
    if not np.allclose(data[:, :2], expected, rtol=0, atol=1e-12):
        raise GridMismatchError(f"{path} was written on a different grid")
    return SpaceTimeField(grid, data[:, 2].reshape(grid.shape))


# ---------------------------------------------------------------------- subcommands


class _Context:
    def __init__(self, spec: ProblemSpec, out: Path, record: RunRecord):
        self.spec, self.out, self.record = spec, out, record
        self.grid = spec.make_grid()
        self.masks = spec.make_regions(self.grid)
        self.params = spec.params()
        self.y0 = spec.initial_state(self.grid)
        self.yd = spec.target(self.grid)
        self.solver = spec.solver
        self.hash = record.spec_hash
        if self.params.weak_coupling_warning:
            record.flags.append(f"1/ell^2 + 1/gamma^2 = {self.params.coupling_strength:.3g} exceeds the contraction heuristic")

    def emit(self, name: str, header, rows) -> None:
        _write_csv(self.out / name, header, rows, self.hash)
        self.record.outputs.append(name)

    def emit_trajectory(self, name: str, column: str, f: SpaceTimeField) -> None:
        write_trajectory(self.out / name, self.grid, column, f, self.hash)
        self.record.outputs.append(name)

    def weights(self):
        r = self.spec.regions
        return default_weights(self.grid, r["omega"], r["O_d"], M=self.spec.carleman_M(), **self.spec.carleman_kwargs())


def run_follower(ctx: _Context, h_path: str | None) -> int:
    grid, spec = ctx.grid, ctx.spec
    h = read_trajectory(Path(h_path), grid) if h_path else grid.zeros()
    box = spec.admissible_box()
    with ctx.record.stage("follower"):
        if box is None:
            sol = solve_saddle_direct(h, ctx.y0, ctx.yd, spec.model_object(grid), ctx.params, ctx.masks, tol=ctx.solver["coupled_tol"], max_sweeps=ctx.solver["max_sweeps"])
        else:
            sol = solve_saddle_projected(h, ctx.y0, ctx.yd, spec.potential(grid), ctx.params, box, ctx.masks, tol=ctx.solver["coupled_tol"], max_iters=ctx.solver["follower_max_iters"], seed=ctx.record.seed)
    ctx.record.summary.update(
        mode=sol.mode,
        J_value=sol.J_value,
        stationarity_v=sol.stationarity_v,
        stationarity_psi=sol.stationarity_psi,
        iterations=sol.iterations,
        terminal_norm=norm_Omega(sol.y.final, grid),
    )
    ctx.record.flags.extend(sol.flags)
    ctx.emit("saddle.csv", ["t", "x", "v_bar", "psi_bar"], _long_format(grid, sol.v_bar, sol.psi_bar))
    ctx.emit_trajectory("trajectory_y.csv", "y", sol.y)
    ctx.emit_trajectory("trajectory_q.csv", "q", sol.q)
    return EXIT_OK if sol.converged else EXIT_NONCONVERGED


def _emit_leader(ctx: _Context, sol) -> None:
    ctx.emit("leader.csv", ["t", "x", "h"], _long_format(ctx.grid, sol.h))
    ctx.emit_trajectory("trajectory_y.csv", "y", sol.y)
    ctx.emit_trajectory("trajectory_q.csv", "q", sol.q)


def run_leader(ctx: _Context) -> int:
    grid, spec, s = ctx.grid, ctx.spec, ctx.solver
    a = spec.potential(grid)
    if not spec.is_linear:
        ctx.record.flags.append("nonlinear model: the leader subcommand uses its linearization at 0 (use 'full' for the fixed-point loop)")
    with ctx.record.stage("leader"):
        sol = minimize_F_eps(ctx.y0, ctx.yd, a, a, ctx.params, ctx.masks, spec.weights["epsilon"], s["cg_tol"], s["max_cg"], inner_tol=s["coupled_tol"])
    ctx.record.summary.update(
        epsilon=sol.epsilon,
        terminal_norm=sol.terminal_norm,
        uncontrolled_norm=sol.uncontrolled_norm,
        identity_residual=sol.identity_residual,
        h_norm=sol.h_norm,
        cg_iterations=sol.cg_iterations,
    )
    ctx.record.flags.extend(sol.flags)
    _emit_leader(ctx, sol)
    with ctx.record.stage("epsilon_sweep"):
        sweep = epsilon_sweep(ctx.y0, ctx.yd, a, a, ctx.params, ctx.masks, spec.epsilons(), ctx.weights(), s["cg_tol"], s["max_cg"])
    rows = [
        [r.epsilon, sol_.terminal_norm, sol_.h_norm, r.weighted_target_norm, r.ratio, sol_.cg_iterations]
        for sol_, r in zip(sweep.solutions, sweep.reports)
    ]
    ctx.emit("sweep.csv", ["epsilon", "terminal_norm", "h_norm", "weighted_target_norm", "bound_ratio", "cg_iterations"], np.array(rows))
    ctx.record.summary["sweep_ratio_spread"] = sweep.ratio_spread
    if any(not r.target_admissible for r in sweep.reports):
        ctx.record.flags.append("target is not admissible: the weighted target norm diverges toward T")
    return EXIT_OK if sol.converged and all(x.converged for x in sweep.solutions) else EXIT_NONCONVERGED


def run_full(ctx: _Context) -> int:
    grid, spec, s = ctx.grid, ctx.spec, ctx.solver
    eps = spec.weights["epsilon"]
    box = spec.admissible_box()
    with ctx.record.stage("full"):
        if box is not None:
            y, q, h, report = solve_projected_hierarchy(
                spec.potential(grid), ctx.y0, ctx.yd, ctx.params, box, ctx.masks, eps, s["outer_tol"], s["max_outer"], s["cg_tol"], s["max_cg"], seed=ctx.record.seed
            )
            ctx.record.summary.update(mode="projected", vi_slack_v=report.vi_slack_v, vi_slack_psi=report.vi_slack_psi)
        else:
            y, q, h, report = solve_semilinear_hierarchy(spec.nonlinearity(), ctx.y0, ctx.yd, ctx.params, ctx.masks, eps, s["outer_tol"], s["max_outer"], cg_tol=s["cg_tol"], max_cg=s["max_cg"])
            ctx.record.summary.update(mode="semilinear", potential_sup_norms=[max(p) for p in report.potential_sup_norms])
    ctx.record.summary.update(
        epsilon=eps,
        outer_iterations=report.outer_iterations,
        converged=report.converged,
        successive_diffs=report.successive_diffs,
        linear_terminal_norm=report.linear_terminal_norm,
        verified_terminal_norm=report.verified_terminal_norm,
    )
    ctx.record.flags.extend(report.flags)
    ctx.emit("leader.csv", ["t", "x", "h"], _long_format(grid, h))
    ctx.emit_trajectory("trajectory_y.csv", "y", y)
    ctx.emit_trajectory("trajectory_q.csv", "q", q)
    rows = np.column_stack([np.arange(1, report.outer_iterations + 1), report.successive_diffs, report.per_iteration_h_norms])
    ctx.emit("sweep.csv", ["outer_iteration", "successive_diff", "h_norm"], rows)
    return EXIT_OK if report.converged else EXIT_NONCONVERGED


def run_observability(ctx: _Context) -> int:
    grid, spec = ctx.grid, ctx.spec
    a = spec.potential(grid)
    weights = ctx.weights()
    rng = np.random.default_rng(ctx.record.seed)
    with ctx.record.stage("observability"):
        c_hat, ratios = empirical_observability_constant(a, a, ctx.params, ctx.masks, weights, spec.run["n_samples"], rng)
    ctx.record.summary.update(C_hat=c_hat, samples=spec.run["n_samples"], defined=len(ratios), s=weights.params.s, rho_capped=bool(np.any(weights.rho_capped)))
    ctx.emit("observability.csv", ["rank", "ratio"], np.column_stack([np.arange(len(ratios)), ratios]))
    return EXIT_OK


def run_check(ctx: _Context) -> int:
    with ctx.record.stage("check"):
        results = run_suite(ctx.spec, seed=ctx.record.seed)
    passed = sum(r.passed for r in results)
    ctx.record.summary.update(checks=len(results), passed=passed)
    ctx.record.flags.extend(r.line() for r in results if not r.passed)
    (ctx.out / "checks.txt").write_text("\n".join(r.line() for r in results) + "\n", encoding="utf-8")
    ctx.record.outputs.append("checks.txt")
    for r in results:
        print(r.line())
    return EXIT_OK if passed == len(results) else EXIT_INTERNAL


# ---------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-stackelberg", description="Robust Stackelberg control of the 1D semilinear heat equation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--spec", help="problem specification (INI); defaults are used when omitted")
    parser.add_argument("--out", default="out", help="output directory (created if missing)")
    parser.add_argument("--seed", type=int, default=None, help="random seed (overrides run.seed)")
    parser.add_argument("--scale", choices=("desk", "small"), default="desk", help="small replaces the grid by 16x16")
    parser.add_argument("--h", dest="h_path", help="follower: leader control CSV (t, x, h) as written by 'leader'")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        spec = load_spec(args.spec) if args.spec else default_spec()
        spec = spec.scaled(args.scale)
    except SpecError as exc:
        print("invalid spec:\n  " + "\n  ".join(exc.violations), file=sys.stderr)
        return EXIT_INVALID
    seed = spec.run["seed"] if args.seed is None else args.seed
    record = RunRecord(args.subcommand, spec.digest(), seed, args.scale)
    out.mkdir(parents=True, exist_ok=True)
    code = EXIT_INTERNAL
    try:
        ctx = _Context(spec, out, record)
        if args.subcommand == "follower":
            code = run_follower(ctx, args.h_path)
        elif args.subcommand == "leader":
            code = run_leader(ctx)
        elif args.subcommand == "full":
            code = run_full(ctx)
        elif args.subcommand == "observability":
            code = run_observability(ctx)
        else:
            code = run_check(ctx)
    except (SpecError, DomainError, GeometryError, GridMismatchError, OSError, ValueError) as exc:
        record.error = f"{type(exc).__name__}: {exc}"
        code = EXIT_INVALID
    except ConvergenceError as exc:
        record.error = f"ConvergenceError: {exc}"
        code = EXIT_NONCONVERGED
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        record.error = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
        code = EXIT_INTERNAL
    record.summary["exit_code"] = code
    record.write(out)
    if record.error:
        print(record.error, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
