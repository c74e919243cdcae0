import numpy as np
import pytest

from conftest import direction_config, direction_problem
from magsteer.domain import TargetField
from magsteer.optimize import (
    CONVERGED,
    MAX_ITERS,
    STALLED,
    BoxBounds,
    OptimizationError,
    OptimizerSettings,
    init_horizon,
    minimize,
    project,
    projected_gradient_norm,
)


def quadratic(A, b):
    return lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b)


def test_project_and_pg_norm():
    b = BoxBounds([0, 0], [1, 1])
    np.testing.assert_array_equal(project([-1, 2], b), [0, 1])
    # gradient pushing outward at an active bound does not count
    assert projected_gradient_norm(np.array([0.0, 0.5]), np.array([1.0, 0.0]), b) == 0.0
    with pytest.raises(ValueError):
        project([0, 0, 0], b)
    with pytest.raises(ValueError):
        BoxBounds([1, 0], [0, 1])


def test_unconstrained_quadratic_converges():
    rng = np.random.default_rng(0)
    Q = rng.standard_normal((6, 6))
    A = Q @ Q.T + np.eye(6)
    b = rng.standard_normal(6)
    box = BoxBounds(-1e3 * np.ones(6), 1e3 * np.ones(6))
    res = minimize(quadratic(A, b), np.zeros(6), box, OptimizerSettings(grad_tol=1e-7))
    assert res.status == CONVERGED
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-6)


def test_bound_constrained_quadratic_matches_kkt():
    A = np.diag([1.0, 2.0, 3.0])
    b = np.array([2.0, -4.0, 0.3])
    box = BoxBounds([-1, -1, -1], [1, 1, 1])
    res = minimize(quadratic(A, b), np.zeros(3), box, OptimizerSettings(grad_tol=1e-12))
    np.testing.assert_allclose(res.x, [1.0, -1.0, 0.1], atol=1e-10)


@pytest.mark.parametrize("memory", [None, 5])
def test_rosenbrock(memory):
    def rosen(x):
        f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
        g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])
        return f, g

    box = BoxBounds([-2, -2], [2, 2])
    res = minimize(rosen, np.array([-1.2, 1.0]), box, OptimizerSettings(grad_tol=1e-8, max_iters=500, memory=memory))
    assert res.converged
    np.testing.assert_allclose(res.x, [1, 1], atol=1e-6)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_max_iters_and_callback():
    seen = []
    A = np.diag([1.0, 100.0])
    res = minimize(
        quadratic(A, np.ones(2)), np.array([5.0, 5.0]), BoxBounds([-10, -10], [10, 10]),
        OptimizerSettings(max_iters=1), seen.append,
    )
    assert res.status == MAX_ITERS and res.iterations == 1
    assert len(seen) == 1 and set(seen[0]) == {"iter", "x", "f", "pg", "step"}


def test_stall_on_inconsistent_gradient():
    # the reported gradient points uphill, so no step ever satisfies Armijo
    res = minimize(lambda x: (x @ x, -x), np.ones(2), BoxBounds([-5, -5], [5, 5]))
    assert res.status == STALLED


def test_infeasible_start_and_nan_objective():
    box = BoxBounds([0.0], [1.0])
    with pytest.raises(ValueError):
        minimize(lambda x: (0.0, 0 * x), np.array([2.0]), box)
    with pytest.raises(OptimizationError):
        minimize(lambda x: (np.nan, 0 * x), np.array([0.5]), box)


def test_horizon_keeps_zero_controls_for_zero_target():
    cfg = direction_config(initial=np.r_[0, 0, 0, 0, 0, 1, 2, 3])
    p = direction_problem(N=4, refinement=1, config=cfg, target=TargetField.constant([0.0, 0.0]))
    traj = init_horizon(p)
    np.testing.assert_allclose(traj.values, np.tile(cfg.initial, (5, 1)))


def test_horizon_improves_on_constant_and_interpolates_with_stride():
    p = direction_problem(N=4, refinement=2)
    const = p.evaluate(np.tile(p.initial, (5, 1))).tracking
    warm = init_horizon(p, tol=1e-6)
    assert p.evaluate(warm).tracking < const
    assert warm.feasible(p.config.lower, p.config.upper)
    coarse = init_horizon(p, kappa=2 * p.tau, tol=1e-6)
    np.testing.assert_allclose(coarse.values[1], 0.5 * (coarse.values[0] + coarse.values[2]))
    with pytest.raises(ValueError):
        init_horizon(p, kappa=1.5 * p.tau)


def test_projection_examples(rng):
    b = BoxBounds([-2, -2], [2, 2])
    np.testing.assert_array_equal(project([3, -3], b), [2, -2])
    np.testing.assert_array_equal(project([0.5, -1], b), [0.5, -1])
    x = rng.uniform(-5, 5, size=(1000, 2))
    for z in x:
        assert np.array_equal(project(project(z, b), b), project(z, b))


def test_one_dimensional_clamped_quadratic():
    res = minimize(lambda x: ((x[0] - 3) ** 2, 2 * (x - 3)), np.zeros(1), BoxBounds([-2], [2]))
    assert res.x[0] == 2.0 and res.pg_norm == 0.0 and res.iterations <= 30


def test_rosenbrock_on_wide_box():
    def rosen(x):
        f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
        return f, np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])

    res = minimize(rosen, np.array([-1.2, 1.0]), BoxBounds([-5, -5], [5, 5]), OptimizerSettings(max_iters=500))
    assert res.converged and np.linalg.norm(res.x - 1) <= 1e-6


def test_horizon_with_single_step_is_one_step_minimization():
    p = direction_problem(N=1, refinement=2)
    warm = init_horizon(p, tol=1e-6)
    direct = minimize(
        p.step_objective(1, p.initial, p.tau), p.initial, BoxBounds(p.config.lower, p.config.upper),
        OptimizerSettings(grad_tol=1e-6),
    )
    np.testing.assert_array_equal(warm.values[1], direct.x)
