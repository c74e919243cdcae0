"""Acceptance criteria 1-10; each test records a pass/fail line for the terminal summary."""
import time

import numpy as np
import pytest

from conftest import (
    ACCEPTANCE,
    central_difference,
    complex_step_grad_sq,
    direction_config,
    direction_problem,
    position_config,
    position_problem,
    random_feasible,
)
from magsteer import cli
from magsteer.fem import assemble_mass, assemble_stiffness, lumped_mass, rectangle_mesh, rotated_rect_mesh
from magsteer.magnetics import b_matrices, eval_field, g_matrices
from magsteer.objective import ControlTrajectory
from magsteer.optimize import BoxBounds, OptimizerSettings, minimize, project
from magsteer.scenario import load_scenario
from magsteer.transport import (
    ControlledDrift,
    TransportSettings,
    assemble_eafe,
    corrected_lumped_inverse,
    gaussian_bump,
    run,
    zero_drift,
)


def record(k, title, passed, detail):
    ACCEPTANCE[k] = (title, bool(passed), detail)
    assert passed, f"criterion {k} ({title}) failed: {detail}"


def sample_points(cfg, rng, n, clearance):
    """``n`` (controls, point) pairs with the point at least ``clearance`` from every source."""
    out = []
    while len(out) < n:
        ctrl = cfg.lower + rng.uniform(size=cfg.lower.size) * (cfg.upper - cfg.lower)
        x = rng.uniform(-1.3, 1.3, size=2)
        sources, _ = cfg.geometry(cfg.split(ctrl)[1])
        if np.min(np.linalg.norm(sources - x, axis=1)) >= clearance:
            out.append((ctrl, x, sources))
    return out


def test_criterion_01_maxwell_identities(rng):
    start = time.perf_counter()
    worst = 0.0
    for cfg in (direction_config(), position_config()):
        for ctrl, x, sources in sample_points(cfg, rng, 500, 0.05):
            step = 1e-4 * np.min(np.linalg.norm(sources - x, axis=1))
            jac = np.empty((2, 2))
            for k in range(2):
                e = np.zeros(2)
                e[k] = step
                jac[:, k] = (eval_field(cfg, ctrl, x + e).h - eval_field(cfg, ctrl, x - e).h) / (2 * step)
            scale = np.linalg.norm(eval_field(cfg, ctrl, x).jacobian)
            curl = abs(jac[1, 0] - jac[0, 1])
            div = abs(jac[0, 0] + jac[1, 1])
            worst = max(worst, curl / scale, div / scale)
    elapsed = time.perf_counter() - start
    record(1, "curl h = 0 and div h = 0", worst <= 1e-6 and elapsed < 1.0,
           f"max relative residual {worst:.2e}, {elapsed:.2f} s")


def test_criterion_02_kelvin_consistency(rng):
    start = time.perf_counter()
    worst, min_div = 0.0, np.inf
    for cfg, mats in ((direction_config(), b_matrices), (position_config(), g_matrices)):
        for ctrl, x, sources in sample_points(cfg, rng, 500, 0.05):
            alpha, second = cfg.split(ctrl)
            _, dirs = cfg.geometry(second)
            grad_sq = complex_step_grad_sq(x, sources, dirs, alpha)
            s = eval_field(cfg, ctrl, x)
            quad = np.einsum("i,kij,j->k", alpha, mats(cfg, second, x), alpha)
            scale = max(np.linalg.norm(grad_sq), 1e-300)
            for a, b in ((grad_sq, s.kelvin), (grad_sq, quad), (s.kelvin, quad)):
                worst = max(worst, np.linalg.norm(a - b) / scale)
            # defocusing: divergence of the force by central differences
            step = 1e-4 * np.min(np.linalg.norm(sources - x, axis=1))
            div = 0.0
            for k in range(2):
                e = np.zeros(2)
                e[k] = step
                div += (eval_field(cfg, ctrl, x + e).kelvin[k] - eval_field(cfg, ctrl, x - e).kelvin[k]) / (2 * step)
            min_div = min(min_div, div)
    elapsed = time.perf_counter() - start
    record(2, "Kelvin force three ways and defocusing", worst <= 1e-6 and min_div >= -1e-8 and elapsed < 1.0,
           f"max pairwise relative gap {worst:.2e}, min div {min_div:.2e}, {elapsed:.2f} s")


def test_criterion_03_objective_gradients(rng):
    start = time.perf_counter()
    worst = 0.0
    for make in (direction_problem, position_problem):
        p = make(N=5, refinement=3)
        for _ in range(20):
            x = random_feasible(p, rng)
            g = p.free_objective(x)[1]
            fd = central_difference(lambda z: p.free_objective(z)[0], x, 1e-6)
            worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
            # one-step functional of the horizon initialization
            n = int(rng.integers(1, p.N + 1))
            anchor = x.reshape(p.N, -1)[n - 2] if n > 1 else p.initial
            fun = p.step_objective(n, anchor, p.tau)
            y = x.reshape(p.N, -1)[n - 1]
            gy = fun(y)[1]
            fdy = central_difference(lambda z: fun(z)[0], y, 1e-6)
            worst = max(worst, np.linalg.norm(gy - fdy) / np.linalg.norm(fdy))
    elapsed = time.perf_counter() - start
    record(3, "objective gradients vs central differences", worst <= 1e-5 and elapsed < 30.0,
           f"max relative error {worst:.2e}, {elapsed:.1f} s")


def test_criterion_04_optimizer(rng):
    st = OptimizerSettings(grad_tol=1e-6, max_iters=2000)
    monotone = True
    converged = True

    # separable quadratic with the unconstrained minimizer c partly outside the box
    d = rng.uniform(0.5, 20.0, size=30)
    c = rng.uniform(-3, 3, size=30)
    box = BoxBounds(-np.ones(30), np.ones(30))
    # an error of 1e-8 needs a tighter stationarity target than 1e-6 when d_i < 1
    tight = OptimizerSettings(grad_tol=1e-10, max_iters=2000)
    res = minimize(lambda x: (0.5 * np.sum(d * (x - c) ** 2), d * (x - c)), np.zeros(30), box, tight)
    quad_err = np.linalg.norm(res.x - project(c, box))
    monotone &= all(b <= a for a, b in zip(res.history, res.history[1:]))
    converged &= res.converged and res.pg_norm <= 1e-6

    def rosen(x):
        f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
        return f, np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])

    rosen_err = 0.0
    for x0 in ([-1.2, 1.0], [0.5, -1.5], [-1.9, 1.9]):
        res = minimize(rosen, np.array(x0), BoxBounds([-2, -2], [2, 2]), st)
        rosen_err = max(rosen_err, np.linalg.norm(res.x - 1.0))
        monotone &= all(b <= a for a, b in zip(res.history, res.history[1:]))
        converged &= res.converged and res.pg_norm <= 1e-6
    ok = quad_err <= 1e-8 and rosen_err <= 1e-6 and monotone and converged
    record(4, "projected BFGS", ok,
           f"quadratic error {quad_err:.1e}, Rosenbrock error {rosen_err:.1e}, monotone {monotone}, "
           f"projected-gradient termination {converged}")


def test_criterion_05_example1_desk(tmp_path):
    start = time.perf_counter()
    sc = load_scenario("example1-direction", {"discretization.N": 25, "discretization.quadrature_refinement": 3})
    traj, summary = cli.cmd_optimize(sc, tmp_path)
    elapsed = time.perf_counter() - start
    const, warm, final = (summary[k]["tracking"] for k in ("constant", "warm_start", "final"))
    factor = const / final
    ok = factor >= 10 and final <= warm and traj.feasible(sc.config.lower, sc.config.upper) and elapsed < 300
    record(5, "desk-scale Example 1 tracking reduction", ok,
           f"J1 constant {const:.3e}, warm start {warm:.3e}, final {final:.3e}, factor {factor:.0f}, "
           f"{summary['iterations']} iterations, {elapsed:.0f} s")
    # the warm start never beats the joint optimizer on the full functional either
    assert summary["final"]["J"] <= summary["warm_start"]["J"]


def test_criterion_06_eafe_structure():
    start = time.perf_counter()
    sc = load_scenario("injection-desk")
    mesh = rotated_rect_mesh(1.8, 0.6, -np.pi / 4, 0.02)
    eps = 1e-5
    K0 = assemble_eafe(mesh, np.zeros(mesh.n_vertices), eps)
    stiff = assemble_stiffness(mesh, eps)
    zero_gap = abs(K0 - stiff).max() / abs(stiff).max()

    traj = ControlTrajectory.constant(sc.config.initial, 4, sc.T)
    drift = ControlledDrift(sc.config, traj, mesh.vertices)
    K = assemble_eafe(mesh, drift(0.0).potential, eps)
    c = gaussian_bump(mesh.vertices, (-0.53, 0.53), 3e-3)
    flux_gap = abs(np.ones(mesh.n_vertices) @ (K @ c)) / np.linalg.norm(c)

    st = TransportSettings(eps=eps, dt=sc.T / 100, T=sc.T)
    res = run(mesh, st, drift, c)
    mass_drift = np.max(np.abs(res.mass - res.mass[0])) / res.mass[0]
    min_c = res.minimum.min()
    elapsed = time.perf_counter() - start
    ok = (
        zero_gap <= 1e-12 and flux_gap <= 1e-12 and mass_drift <= 1e-8 and min_c >= -1e-12
        and mesh.is_nonobtuse() and elapsed < 60
    )
    record(6, "EAFE structure", ok,
           f"zero-drift gap {zero_gap:.1e}, |B(c, 1)|/|c| {flux_gap:.1e}, mass drift {mass_drift:.1e}, "
           f"min c {min_c:.1e}, {elapsed:.1f} s")


def test_criterion_07_heat_convergence():
    start = time.perf_counter()
    T = 0.05

    def exact(x, y, t):
        return np.exp(-2 * np.pi**2 * t) * np.cos(np.pi * x) * np.cos(np.pi * y)

    errors = []
    for k in range(3, 7):
        h = 2.0**-k
        mesh = rectangle_mesh(0, 1, 0, 1, h)
        x, y = mesh.vertices.T
        st = TransportSettings(eps=1.0, dt=h * h, T=T)
        res = run(mesh, st, zero_drift(mesh.n_vertices), exact(x, y, 0.0), snapshot_times=(T,))
        e = res.snapshots[-1].values - exact(x, y, res.snapshots[-1].time)
        errors.append(float(np.sqrt(e @ (assemble_mass(mesh) @ e))))
    ratios = [a / b for a, b in zip(errors, errors[1:])]
    elapsed = time.perf_counter() - start
    record(7, "manufactured heat solution with implicit EAFE", min(ratios) >= 1.8 and elapsed < 120,
           f"L2 errors {', '.join(f'{e:.2e}' for e in errors)}, ratios {', '.join(f'{r:.2f}' for r in ratios)}, "
           f"{elapsed:.1f} s")


def test_criterion_08_lumped_mass_correction():
    start = time.perf_counter()
    mesh = rectangle_mesh(0, 1, 0, 1, 0.125)
    M = assemble_mass(mesh)
    mbar = lumped_mass(M)
    dense = M.toarray()
    x, y = mesh.vertices.T
    # constants are left out: both approximations reproduce them exactly
    vectors = [np.cos(a * np.pi * x) * np.cos(b * np.pi * y) for a in range(4) for b in range(4) if a or b]
    vectors += [x * x, x * y, np.exp(x - y), np.sin(2 * x + y), 1 + x * y * y]
    better = 0
    oracle_gap = 0.0
    for v in vectors:
        z = M @ v
        oracle_gap = max(oracle_gap, np.linalg.norm(np.linalg.solve(dense, z) - v) / np.linalg.norm(v))
        plain = np.linalg.norm(z / mbar - v)
        corrected = np.linalg.norm(corrected_lumped_inverse(M, mbar, z) - v)
        better += corrected < plain
    elapsed = time.perf_counter() - start
    ok = better == len(vectors) and oracle_gap <= 1e-12 and elapsed < 10
    record(8, "lumped-mass correction", ok,
           f"corrected closer on {better}/{len(vectors)} vectors, dense oracle gap {oracle_gap:.1e}")


def _pipeline(name, out):
    sc = load_scenario(name)
    traj, summary = cli.cmd_optimize(sc, out)
    mesh, result = cli.cmd_simulate(sc, traj, out)
    return sc, summary, result


def test_criterion_09_obstacle_desk(tmp_path):
    start = time.perf_counter()
    sc, summary, res = _pipeline("obstacle-desk", tmp_path)
    elapsed = time.perf_counter() - start
    dist = np.linalg.norm(res.center[-1] - [-0.1, -0.1])
    retained = res.mass.min() / res.mass[0]
    ok = dist <= 0.05 and retained >= 0.9 and res.times[-1] == pytest.approx(0.6) and elapsed < 600
    record(9, "obstacle steering at desk scale", ok,
           f"final center ({res.center[-1, 0]:.4f}, {res.center[-1, 1]:.4f}), distance {dist:.4f}, "
           f"min mass {100 * retained:.2f}% of initial, {elapsed:.0f} s")
    # explicit P1 transport is not monotone; boundedness is the invariant to hold
    assert res.maximum.max() <= 2 * res.maximum[0]


def test_criterion_10_injection_desk(tmp_path):
    start = time.perf_counter()
    sc, summary, res = _pipeline("injection-desk", tmp_path)
    elapsed = time.perf_counter() - start
    dist = np.linalg.norm(res.center[-1])
    ok = dist <= 0.1 and elapsed < 300
    record(10, "magnetic injection at desk scale", ok,
           f"final center ({res.center[-1, 0]:.4f}, {res.center[-1, 1]:.4f}), distance {dist:.4f}, {elapsed:.0f} s")
