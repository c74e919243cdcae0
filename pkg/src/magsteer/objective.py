"""Discrete tracking functionals and their exact gradients.

For nodal controls ``u^0..u^N`` (``u^0`` fixed) the functional is

    tau * sum_n 1/2 sum_q w_q |psi_n kelvin(u^n; X(t_n, x_q)) - fhat^n_q|^2
      + lam / (2 tau) sum_n |alpha^n - alpha^{n-1}|^2
      + mu  / (2 tau) sum_n |c^n - c^{n-1}|^2

where ``c`` are angles (weight ``eta``) or curve parameters (weight ``beta``).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from magsteer.domain import MovingDomain, QuadratureRule, TargetField, time_averaged_target
from magsteer.magnetics import (
    DIRECTION,
    POSITION,
    DipoleConfig,
    _combine,
    dipole_terms,
    unit_direction_derivative,
)


@dataclass
class ObjectiveConfig:
    lam: float = 1e-5
    eta: float = 1e-5
    beta: float = 1e-5
    mode: str = DIRECTION

    def __post_init__(self):
        if min(self.lam, self.eta, self.beta) < 0:
            raise ValueError("smoothing weights must be nonnegative")
        if self.mode not in (DIRECTION, POSITION):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def second_weight(self) -> float:
        return self.eta if self.mode == DIRECTION else self.beta


@dataclass
class ControlTrajectory:
    """Nodal controls on ``N + 1`` uniform time nodes; row 0 is fixed."""

    values: np.ndarray
    tau: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))

    @classmethod
    def constant(cls, initial, N: int, T: float):
        return cls(np.tile(np.asarray(initial, float), (N + 1, 1)), T / N)

    @classmethod
    def from_free(cls, initial, free, N: int, T: float):
        free = np.asarray(free, dtype=float).reshape(N, -1)
        return cls(np.vstack([np.asarray(initial, float)[None, :], free]), T / N)

    @property
    def N(self) -> int:
        return self.values.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(self.N + 1)

    @property
    def free(self) -> np.ndarray:
        return self.values[1:].ravel()

    def at(self, t):
        """Piecewise-linear interpolation in time (clamped at the ends)."""
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.times, col) for col in self.values.T], axis=-1)

    def interval_at(self, t):
        """Controls with node ``n >= 1`` placed at the midpoint of its step, linear in between.

        Node ``n`` is fitted to the target averaged over ``[t_{n-1}, t_n]``, so
        this is the continuous-time control matching the discrete functional;
        the fixed node 0 is never used.
        """
        t = np.asarray(t, dtype=float)
        mids = self.tau * (np.arange(1, self.N + 1) - 0.5)
        return np.stack([np.interp(t, mids, col) for col in self.values[1:].T], axis=-1)

    def feasible(self, lower, upper, tol=0.0) -> bool:
        return bool(np.all(self.values >= lower - tol) and np.all(self.values <= upper + tol))


class Breakdown(NamedTuple):
    total: float
    tracking: float
    intensity: float
    control: float


class TrackingProblem:
    """Time-discrete tracking problem on a moving disk.

    Precomputes mapped quadrature nodes and time-averaged targets for every
    step so that evaluations only touch the dipole fields.
    """

    def __init__(
        self,
        config: DipoleConfig,
        domain: MovingDomain,
        rule: QuadratureRule,
        target: TargetField,
        N: int,
        T: float,
        weights: ObjectiveConfig | None = None,
        workers: int = 1,
    ):
        if N < 1:
            raise ValueError("N must be positive")
        self.config = config
        self.domain = domain
        self.rule = rule
        self.target = target
        self.N = int(N)
        self.T = float(T)
        self.tau = self.T / self.N
        self.weights = weights or ObjectiveConfig(mode=config.mode)
        if self.weights.mode != config.mode:
            raise ValueError("objective mode does not match the dipole configuration")
        self.workers = max(1, int(workers))
        times = self.tau * np.arange(1, self.N + 1)
        self.points = np.stack([domain.map_point(t, rule.nodes) for t in times])
        self.scale = np.array([domain.scale(t) for t in times], dtype=float)
        self.fhat = np.stack([time_averaged_target(target, n, self.tau, domain, rule) for n in range(1, self.N + 1)])
        self._last = None  # (free vector bytes, Breakdown) of the latest free_objective call

    @property
    def n_controls(self) -> int:
        return 2 * self.config.n

    @property
    def initial(self) -> np.ndarray:
        return self.config.initial

    def lower(self) -> np.ndarray:
        return np.tile(self.config.lower, self.N)

    def upper(self) -> np.ndarray:
        return np.tile(self.config.upper, self.N)

    def _values(self, traj) -> np.ndarray:
        values = traj.values if isinstance(traj, ControlTrajectory) else np.asarray(traj, dtype=float)
        if values.shape != (self.N + 1, self.n_controls):
            raise ValueError(f"trajectory shape {values.shape} != {(self.N + 1, self.n_controls)}")
        return values

    # -- per-step tracking term -------------------------------------------------

    def _geometry(self, second, with_derivative):
        cfg = self.config
        sources, dirs = cfg.geometry(second)
        if sources.ndim == 3:
            sources = sources[:, None]
        if dirs.ndim == 3:
            dirs = dirs[:, None]
        extra = None
        if with_derivative:
            if cfg.mode == DIRECTION:
                extra = unit_direction_derivative(second)[:, None]
            else:
                extra = cfg.curve_derivatives(second)[:, None]
        return sources, dirs, extra

    def _tracking_chunk(self, ctrl, steps, with_grad):
        """Tracking values ``1/2 sum_q w |R|^2`` per step and their control gradients."""
        cfg = self.config
        alpha, second = cfg.split(ctrl)
        pts = self.points[steps]
        psi = self.scale[steps][:, None, None]
        sources, dirs, dsec = self._geometry(second, with_grad)
        order = 2 if (with_grad and cfg.mode == POSITION) else 1
        terms = dipole_terms(pts, sources, dirs, order=order)
        v, dv = terms[0], terms[1]
        a = alpha[:, None, :]
        h, jac, kel = _combine(a, v, dv)
        res = psi * kel - self.fhat[steps]
        w = self.rule.weights
        vals = 0.5 * np.sum(w[None, :] * np.sum(res * res, axis=-1), axis=-1)
        if not with_grad:
            return vals, None

        wres = (w[None, :, None] * psi) * res
        dkel_alpha = 2.0 * (np.einsum("kqia,kqac->kqic", v, jac) + np.einsum("kqa,kqiac->kqic", h, dv))
        g_alpha = np.einsum("kqc,kqic->ki", wres, dkel_alpha)
        if cfg.mode == DIRECTION:
            vp, dvp = dipole_terms(pts, sources, dsec)
            dh = a[..., None] * vp
            djac = a[..., None, None] * dvp
        else:
            ddv = terms[2]
            dh = -a[..., None] * np.einsum("kqiaj,kqij->kqia", dv, np.broadcast_to(dsec, v.shape))
            djac = -a[..., None, None] * np.einsum("kqiacj,kqij->kqiac", ddv, np.broadcast_to(dsec, v.shape))
        dkel_sec = 2.0 * (np.einsum("kqia,kqac->kqic", dh, jac) + np.einsum("kqa,kqiac->kqic", h, djac))
        g_sec = np.einsum("kqc,kqic->ki", wres, dkel_sec)
        return vals, np.concatenate([g_alpha, g_sec], axis=1)

    def _tracking(self, ctrl, steps, with_grad):
        if self.workers == 1 or len(steps) < 2 * self.workers:
            return self._tracking_chunk(ctrl, steps, with_grad)
        parts = np.array_split(np.arange(len(steps)), self.workers)
        with ThreadPoolExecutor(self.workers) as pool:
            out = list(pool.map(lambda idx: self._tracking_chunk(ctrl[idx], steps[idx], with_grad), parts))
        vals = np.concatenate([o[0] for o in out])
        grads = np.concatenate([o[1] for o in out]) if with_grad else None
        return vals, grads

    # -- full functional -----------------------------------------------------------

    def kelvin(self, traj) -> np.ndarray:
        """Kelvin force at the mapped quadrature nodes, shape ``(N, Q, 2)``."""
        values = self._values(traj)
        alpha, second = self.config.split(values[1:])
        sources, dirs, _ = self._geometry(second, False)
        v, dv = dipole_terms(self.points, sources, dirs)
        return _combine(alpha[:, None, :], v, dv)[2]

    def evaluate(self, traj) -> Breakdown:
        values = self._values(traj)
        steps = np.arange(self.N)
        vals, _ = self._tracking(values[1:], steps, False)
        return self._assemble_value(values, vals)

    def _assemble_value(self, values, step_vals) -> Breakdown:
        n = self.config.n
        diff = np.diff(values, axis=0)
        tracking = self.tau * float(np.sum(step_vals))
        inten = self.weights.lam / (2.0 * self.tau) * float(np.sum(diff[:, :n] ** 2))
        ctrl = self.weights.second_weight / (2.0 * self.tau) * float(np.sum(diff[:, n:] ** 2))
        return Breakdown(tracking + inten + ctrl, tracking, inten, ctrl)

    def _smoothing_gradient(self, values):
        n = self.config.n
        diff = np.diff(values, axis=0)
        coef = np.concatenate([np.full(n, self.weights.lam), np.full(n, self.weights.second_weight)]) / self.tau
        g = coef * diff
        g[:-1] -= coef * diff[1:]
        return g

    def gradient(self, traj) -> np.ndarray:
        """Gradient with respect to nodes ``1..N``, shape ``(N, 2 n_p)``."""
        return self.value_and_gradient(traj)[1]

    def value_and_gradient(self, traj):
        values = self._values(traj)
        steps = np.arange(self.N)
        vals, g = self._tracking(values[1:], steps, True)
        return self._assemble_value(values, vals), self.tau * g + self._smoothing_gradient(values)

    def free_objective(self, free):
        """``(J, dJ/dfree)`` for the flattened free nodes, as the optimizer expects."""
        free = np.asarray(free, float)
        values = np.vstack([self.initial[None, :], free.reshape(self.N, -1)])
        b, g = self.value_and_gradient(values)
        self._last = (free.tobytes(), b)
        return b.total, g.ravel()

    def breakdown_free(self, free) -> Breakdown:
        """Breakdown at ``free``; reuses the last :meth:`free_objective` evaluation when it matches."""
        free = np.asarray(free, float)
        if self._last is not None and self._last[0] == free.tobytes():
            return self._last[1]
        values = np.vstack([self.initial[None, :], free.reshape(self.N, -1)])
        return self.evaluate(values)

    # -- single-step functional for the horizon initialization ------------------

    def step_objective(self, n: int, anchor, kappa: float):
        """Callback for one-step problem ``n`` (1-based) anchored at ``anchor``."""
        if not 1 <= n <= self.N:
            raise ValueError(f"step {n} outside 1..{self.N}")
        anchor = np.asarray(anchor, dtype=float)
        k = self.config.n
        coef = np.concatenate([np.full(k, self.weights.lam), np.full(k, self.weights.second_weight)]) / kappa**2
        steps = np.array([n - 1])

        def fun(x):
            x = np.asarray(x, dtype=float)
            vals, g = self._tracking(x[None, :], steps, True)
            d = x - anchor
            return float(vals[0] + 0.5 * np.sum(coef * d * d)), g[0] + coef * d

        return fun
