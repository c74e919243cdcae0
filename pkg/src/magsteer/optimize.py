"""Box-constrained minimization by projected BFGS with Armijo backtracking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERS = "max_iters"
STALLED = "stalled"


class OptimizationError(RuntimeError):
    pass


@dataclass
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape:
            raise ValueError("bound vectors differ in shape")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass
class OptimizerSettings:
    grad_tol: float = 1e-6
    max_iters: int = 1000
    c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    memory: int | None = None  # None: dense inverse Hessian on the free variables
    active_tol: float = 1e-3

    def __post_init__(self):
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    iterations: int
    status: str
    pg_norm: float
    nfev: int
    history: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def project(x, b: BoxBounds) -> np.ndarray:
    """Componentwise clamp ``min(upper, max(x, lower))``."""
    x = np.asarray(x, dtype=float)
    if x.shape != b.lower.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {b.lower.shape}")
    return np.minimum(b.upper, np.maximum(x, b.lower))


def projected_gradient_norm(x, g, b: BoxBounds) -> float:
    return float(np.linalg.norm(x - project(x - g, b)))


class _InverseHessian:
    """Dense or limited-memory inverse BFGS approximation on a free index set."""

    def __init__(self, free, gamma, memory):
        self.free = free
        self.gamma = gamma
        self.memory = memory
        self.H = None if memory else gamma * np.eye(int(free.sum()))
        self.pairs: list[tuple[np.ndarray, np.ndarray, float]] = []

    def apply(self, g):
        q = g[self.free]
        if self.H is not None:
            return self.H @ q
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            q = q - a * y
            alphas.append(a)
        r = self.gamma * q
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            r = r + s * (a - rho * (y @ r))
        return r

    def update(self, s_full, y_full):
        s, y = s_full[self.free], y_full[self.free]
        sy = s @ y
        if not sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        rho = 1.0 / sy
        if self.H is not None:
            Hy = self.H @ y
            self.H += (rho * rho * (y @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        else:
            self.pairs.append((s, y, rho))
            if len(self.pairs) > self.memory:
                self.pairs.pop(0)
        return True


def _acceptable(f, ft, slope0, slope1, c1) -> bool:
    """Armijo test, or its approximate form once the decrease is lost in roundoff.

    The approximate form still requires ``ft <= f`` and asks the directional
    derivative at the trial point not to have turned strongly positive.
    """
    if ft <= f + c1 * slope0:
        return True
    near_roundoff = f - ft <= 1e-12 * max(1.0, abs(f))
    return ft <= f and near_roundoff and slope1 <= (1.0 - 2.0 * c1) * -slope0


def minimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    bounds: BoxBounds,
    settings: OptimizerSettings | None = None,
    callback: Callable[[dict], None] | None = None,
) -> OptimizeResult:
    """Minimize ``fun`` over a box.

    ``fun(x)`` returns ``(value, gradient)``.  Iterates stay feasible and the
    accepted objective values never increase.  Stops when the norm of
    ``x - project(x - grad)`` drops to ``settings.grad_tol``.
    """
    st = settings or OptimizerSettings()
    x = np.asarray(x0, dtype=float).copy()
    if not bounds.contains(x):
        raise ValueError("initial point is not feasible")

    nfev = 0

    def evaluate(z):
        nonlocal nfev
        nfev += 1
        val, grad = fun(z)
        val = float(val)
        grad = np.asarray(grad, dtype=float)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            raise OptimizationError(f"objective returned a non-finite value at evaluation {nfev}")
        return val, grad

    f, g = evaluate(x)
    history = [f]
    gamma = 1.0
    hess = None
    active_prev = None
    status = MAX_ITERS
    pg = projected_gradient_norm(x, g, bounds)
    it = 0
    while True:
        if pg <= st.grad_tol:
            status = CONVERGED
            break
        if it >= st.max_iters:
            break
        eps = min(st.active_tol, pg)
        active = ((x - bounds.lower <= eps) & (g > 0)) | ((bounds.upper - x <= eps) & (g < 0))
        free = ~active
        if hess is None or active_prev is None or np.any(active != active_prev):
            hess = _InverseHessian(free, gamma, st.memory)
        active_prev = active

        step = None
        for use_bfgs in (True, False):
            d = -g.copy()
            if use_bfgs and free.any():
                d[free] = -hess.apply(g)
            t = 1.0 if use_bfgs else gamma
            for _ in range(st.max_backtracks):
                xt = project(x + t * d, bounds)
                decrease = g @ (xt - x)
                if decrease >= 0:
                    if use_bfgs:
                        break
                    t *= st.backtrack
                    continue
                ft, gt = evaluate(xt)
                if _acceptable(f, ft, decrease, gt @ (xt - x), st.c1):
                    step = (xt, ft, gt, t)
                    break
                t *= st.backtrack
            if step is not None:
                break
            hess = _InverseHessian(free, gamma, st.memory)
        if step is None:
            status = STALLED
            log.warning("line search failed at iteration %d (pg=%.3e)", it, pg)
            break

        xt, ft, gt, t = step
        s, y = xt - x, gt - g
        if hess.update(s, y):
            gamma = (s @ y) / (y @ y)
        x, f, g = xt, ft, gt
        it += 1
        history.append(f)
        pg = projected_gradient_norm(x, g, bounds)
        if callback is not None:
            callback({"iter": it, "x": x, "f": f, "pg": pg, "step": t})
    return OptimizeResult(x=x, fun=f, iterations=it, status=status, pg_norm=pg, nfev=nfev, history=history)


class HorizonError(OptimizationError):
    pass


def init_horizon(problem, kappa: float | None = None, tol: float = 1e-3, settings: OptimizerSettings | None = None):
    """Warm start by minimizing one time step at a time.

    Each step minimizes the tracking misfit at that step plus a proximal
    penalty towards the previous solution, which then becomes the next anchor.
    For ``kappa`` an integer multiple of the step, nodes in between are
    interpolated linearly.
    """
    from magsteer.objective import ControlTrajectory

    tau = problem.tau
    kappa = tau if kappa is None else float(kappa)
    stride = int(round(kappa / tau))
    if stride < 1 or abs(stride * tau - kappa) > 1e-9 * tau or problem.N % stride:
        raise ValueError("kappa must be an integer multiple of the time step dividing the horizon")
    base = settings or OptimizerSettings()
    st = OptimizerSettings(
        grad_tol=tol,
        max_iters=base.max_iters,
        c1=base.c1,
        backtrack=base.backtrack,
        max_backtracks=base.max_backtracks,
        memory=base.memory,
        active_tol=base.active_tol,
    )
    box = BoxBounds(problem.config.lower, problem.config.upper)
    values = np.empty((problem.N + 1, problem.n_controls))
    values[0] = problem.initial
    anchor = problem.initial.copy()
    total_iters = 0
    for j in range(1, problem.N // stride + 1):
        n = j * stride
        try:
            res = minimize(problem.step_objective(n, anchor, kappa), anchor, box, st)
        except OptimizationError as exc:
            raise HorizonError(f"step {n}: {exc}") from exc
        total_iters += res.iterations
        for m in range(n - stride + 1, n + 1):
            w = (m - (n - stride)) / stride
            values[m] = (1 - w) * anchor + w * res.x
        anchor = res.x
    log.info("horizon initialization: %d iterations", total_iters)
    return ControlTrajectory(values, tau, meta={"iterations": total_iters})
