"""Command-line front end: ``magsteer {optimize,simulate,pipeline,validate}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import yaml

from magsteer.export import (
    ControlsFileError,
    JsonLinesLog,
    read_controls,
    write_controls,
    write_diagnostics,
    write_force_grid,
    write_vtk,
)
from magsteer.fem import MeshError, write_mesh
from magsteer.objective import ControlTrajectory
from magsteer.optimize import STALLED, BoxBounds, OptimizationError, init_horizon, minimize
from magsteer.scenario import Scenario, ScenarioError, bundled_scenarios, load_scenario
from magsteer.transport import ControlledDrift, TransportError, gaussian_bump, run

log = logging.getLogger("magsteer")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STALL = 3
EXIT_SOLVER = 4


class StallError(RuntimeError):
    pass


def _breakdown_dict(b):
    return {"J": b.total, "tracking": b.tracking, "intensity": b.intensity, "control": b.control}


def cmd_optimize(sc: Scenario, out: Path, threads: int = 1, seed: int | None = None):
    """Horizon warm start then the full box-constrained solve; writes controls and logs.

    Returns ``(trajectory, summary dict)``.
    """
    out.mkdir(parents=True, exist_ok=True)
    problem = sc.problem(workers=threads)
    start = time.perf_counter()
    const = ControlTrajectory.constant(problem.initial, sc.N, sc.T)
    with JsonLinesLog(out / "optimize_log.jsonl") as jl:
        b0 = problem.evaluate(const)
        jl.write(stage="constant", seed=seed, **_breakdown_dict(b0))
        warm = init_horizon(problem, kappa=sc.kappa, tol=sc.init_tol, settings=sc.optimizer)
        b1 = problem.evaluate(warm)
        jl.write(stage="warm_start", iterations=warm.meta["iterations"], **_breakdown_dict(b1))

        def callback(info):
            b = problem.breakdown_free(info["x"])
            jl.write(stage="full", iter=info["iter"], pg=info["pg"], step=info["step"], **_breakdown_dict(b))

        bounds = BoxBounds(problem.lower(), problem.upper())
        res = minimize(problem.free_objective, warm.free, bounds, sc.optimizer, callback)
        traj = ControlTrajectory.from_free(problem.initial, res.x, sc.N, sc.T)
        b2 = problem.evaluate(traj)
        jl.write(stage="final", status=res.status, iterations=res.iterations, pg=res.pg_norm, **_breakdown_dict(b2))
    write_controls(out / "controls.csv", traj, sc.config)
    write_force_grid(out / "force_grid.csv", sc.config, traj, sc.force_grid["box"], sc.force_grid["n"])
    summary = {
        "scenario": sc.name,
        "status": res.status,
        "iterations": res.iterations,
        "warm_start_iterations": warm.meta["iterations"],
        "pg_norm": res.pg_norm,
        "constant": _breakdown_dict(b0),
        "warm_start": _breakdown_dict(b1),
        "final": _breakdown_dict(b2),
    }
    (out / "optimize_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info(
        "optimize: %s after %d iterations, J = %.6e (%.1f s)",
        res.status, res.iterations, b2.total, time.perf_counter() - start,
    )
    if res.status == STALLED:
        raise StallError(f"optimizer stalled at iteration {res.iterations} (pg = {res.pg_norm:.3e})")
    return traj, summary


def check_coverage(sc: Scenario, traj: ControlTrajectory):
    if traj.values.shape[1] != 2 * sc.config.n:
        raise ControlsFileError(f"controls have {traj.values.shape[1]} columns, scenario needs {2 * sc.config.n}")
    end = traj.times[-1]
    if abs(end - sc.pde.settings.T) > 1e-9 * max(1.0, end):
        raise ControlsFileError(f"controls cover [0, {end:.17g}] but the simulation runs to T = {sc.pde.settings.T}")


def cmd_simulate(sc: Scenario, traj: ControlTrajectory, out: Path):
    """Transport the initial bump under the drift of ``traj``; writes VTK snapshots and diagnostics."""
    if sc.pde is None:
        raise ScenarioError("pde: section required for simulation")
    check_coverage(sc, traj)
    out.mkdir(parents=True, exist_ok=True)
    mesh = sc.mesh()
    write_mesh(mesh, out / "mesh.txt")
    pde = sc.pde
    c0 = gaussian_bump(mesh.vertices, pde.center, pde.sigma2)
    drift = ControlledDrift(sc.config, traj, mesh.vertices, pde.interpolation)
    result = run(mesh, pde.settings, drift, c0, pde.snapshots)
    for k, snap in enumerate(result.snapshots):
        write_vtk(out / f"concentration_{k:03d}.vtk", mesh, snap.values, time=snap.time)
    write_diagnostics(out / "diagnostics.csv", result)
    log.info("simulate: final mass %.6e, center of mass %s", result.mass[-1], result.center[-1])
    return mesh, result


def _parse_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ScenarioError(f"--set {item!r}: expected KEY=VALUE")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magsteer", description="Dipole control design and ferrofluid transport.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("optimize", "compute optimal dipole controls"),
        ("simulate", "transport a concentration with given controls"),
        ("pipeline", "optimize, then simulate"),
        ("validate", "check a scenario file and exit"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--scenario", required=True, help=f"YAML file or bundled name ({', '.join(bundled_scenarios())})")
        s.add_argument("--out", type=Path, help="output directory (default: scenario 'output' or out/<name>)")
        s.add_argument("--threads", type=int, default=1, help="worker threads for the objective")
        s.add_argument("--seed", type=int, default=None, help="recorded in the logs; the computation is deterministic")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario field, e.g. discretization.N=25")
        if name == "simulate":
            s.add_argument("--controls", type=Path, help="controls CSV (default: <out>/controls.csv)")
    return p


def _configure_logging():
    level = os.environ.get("KS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_VALIDATION
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        sc = load_scenario(args.scenario, _parse_overrides(args.set))
        if args.command in ("simulate", "pipeline") and sc.pde is None:
            raise ScenarioError("pde: section required for simulation")
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out = args.out or Path(sc.output or Path("out") / sc.name)

    if args.command == "validate":
        print(f"{sc.name}: ok ({sc.config.n} dipoles, {sc.config.mode} mode, N = {sc.N}, T = {sc.T})")
        return EXIT_OK
    try:
        if args.command in ("optimize", "pipeline"):
            cmd_optimize(sc, out, args.threads, args.seed)
        if args.command in ("simulate", "pipeline"):
            controls = getattr(args, "controls", None) or out / "controls.csv"
            traj = read_controls(controls, sc.config)
            cmd_simulate(sc, traj, out)
    except (ControlsFileError, ScenarioError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StallError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STALL
    except OptimizationError as exc:
        print(f"error: optimizer failed: {exc}", file=sys.stderr)
        return EXIT_STALL
    except TransportError as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(f"outputs written to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
