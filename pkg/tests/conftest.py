import numpy as np
import pytest

from magsteer.domain import MovingDomain, TargetField
from magsteer.magnetics import POSITION, CircleCurve, Dipole, DipoleConfig
from magsteer.objective import ObjectiveConfig, TrackingProblem

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 11):
        title, passed, detail = ACCEPTANCE.get(k, ("", False, "did not run to completion"))
        terminalreporter.write_line(f"criterion {k:2d} {'PASS' if passed else 'FAIL'}: {title} ({detail})")


def reference_field(x, sources, dirs, alpha):
    """Plain loop over sources; accepts complex ``x`` for complex-step derivatives."""
    h = np.zeros(2, dtype=np.result_type(x, float))
    for xi, d, a in zip(sources, dirs, alpha):
        r = x - xi
        p = r[0] * r[0] + r[1] * r[1]  # no conjugation, so the complex step stays analytic
        M = (2.0 * np.outer(r, r) / p - np.eye(2)) / p
        h = h + a * (M @ d)
    return h


def complex_step_jacobian(x, sources, dirs, alpha, step=1e-30):
    """``jac[i, k] = d h_i / d x_k`` of :func:`reference_field`, exact to roundoff."""
    jac = np.empty((2, 2))
    for k in range(2):
        z = x.astype(complex)
        z[k] += 1j * step
        jac[:, k] = reference_field(z, sources, dirs, alpha).imag / step
    return jac


def complex_step_grad_sq(x, sources, dirs, alpha, step=1e-30):
    """Gradient of ``|h|^2`` by complex step of the reference field."""
    g = np.empty(2)
    for k in range(2):
        z = x.astype(complex)
        z[k] += 1j * step
        h = reference_field(z, sources, dirs, alpha)
        g[k] = (h[0] * h[0] + h[1] * h[1]).imag / step
    return g


def direction_config(initial=None):
    """Four fixed dipoles on the circle of radius 1.2."""
    ang = np.arange(4) * np.pi / 2
    return DipoleConfig(
        [Dipole(position=1.2 * np.array([np.cos(a), np.sin(a)])) for a in ang],
        lower=np.r_[-2 * np.ones(4), np.zeros(4)],
        upper=np.r_[2 * np.ones(4), 2 * np.pi * np.ones(4)],
        initial=np.r_[2, 0, 0, 2, 0, np.pi / 2, 3 * np.pi / 2, 3 * np.pi / 2] if initial is None else initial,
    )


def position_config():
    """Three dipoles sliding on the circle of radius 1.2 with fixed radial directions."""
    dirs = (0.0, 2 * np.pi / 3, 4 * np.pi / 3)
    return DipoleConfig(
        [Dipole(trajectory=CircleCurve(1.2), direction_angle=a) for a in dirs],
        mode=POSITION,
        lower=np.r_[-2 * np.ones(3), -np.pi / 90, np.pi / 90, 5 * np.pi / 4],
        upper=np.r_[2 * np.ones(3), np.pi / 90, 3 * np.pi / 4, 2 * np.pi],
        initial=np.r_[-2, 0, 0, 0, 2 * np.pi / 3, 4 * np.pi / 3],
    )


def direction_problem(N=5, refinement=3, lam=1e-5, eta=1e-5, config=None, target=None, workers=1):
    dom = MovingDomain.linear((-0.6, 0.6), 0.2, 0.75, (0.0, 0.0))
    target = target or TargetField.constant([2**-0.5, -(2**-0.5)])
    return TrackingProblem(
        config or direction_config(), dom, dom.quadrature(refinement), target, N, 0.75,
        ObjectiveConfig(lam, eta), workers,
    )


def position_problem(N=5, refinement=3, lam=1e-5, beta=1e-5):
    dom = MovingDomain.linear((-0.75, 0.0), 0.2, 0.75, (0.0, 0.0))
    return TrackingProblem(
        position_config(), dom, dom.quadrature(refinement), TargetField.constant([1.0, 0.0]), N, 0.75,
        ObjectiveConfig(lam, beta=beta, mode=POSITION),
    )


def random_feasible(problem, rng):
    lo, up = problem.lower(), problem.upper()
    return lo + rng.uniform(size=lo.size) * (up - lo)


def central_difference(fun, x, step=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2 * step)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)
