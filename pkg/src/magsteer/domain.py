"""Moving target subdomain, disk quadrature and time-averaged target sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_GAUSS3_NODES = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GAUSS3_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 9.0


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values) -> float:
        """Sum ``w_q g(x_q)`` over the leading node axis."""
        return np.tensordot(self.weights, np.asarray(values, float), axes=(0, 0))

    @property
    def area(self) -> float:
        return float(self.weights.sum())


@dataclass
class PiecewiseLinear:
    """Continuous piecewise-linear function of time, constant beyond the last knot."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.ndim != 1 or len(self.times) != len(self.values):
            raise ValueError("knot times and values must have matching length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("knot times must be strictly increasing")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.values.ndim == 1:
            return np.interp(t, self.times, self.values)
        return np.stack([np.interp(t, self.times, self.values[:, k]) for k in range(self.values.shape[1])], -1)

    @property
    def breakpoints(self) -> np.ndarray:
        return self.times


@dataclass
class MovingDomain:
    """Disk ``D_hat`` carried by ``X(t, x) = translation(t) + scale(t) * x``.

    ``path`` lists barycenter positions of the disk at knot ``times``; the
    translation is the displacement from the first knot so that ``X(0, .)`` is
    the identity.
    """

    center: np.ndarray
    radius: float
    times: np.ndarray
    path: np.ndarray
    scale_times: np.ndarray | None = None
    scale_values: np.ndarray | None = None
    _translation: PiecewiseLinear = field(init=False, repr=False)
    _scale: PiecewiseLinear = field(init=False, repr=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.path = np.atleast_2d(np.asarray(self.path, dtype=float))
        self.times = np.asarray(self.times, dtype=float)
        if self.radius <= 0:
            raise ValueError("disk radius must be positive")
        if self.times[0] != 0.0:
            raise ValueError("path must start at t = 0")
        self._translation = PiecewiseLinear(self.times, self.path - self.path[0])
        if self.scale_times is None:
            self.scale_times, self.scale_values = np.array([0.0]), np.array([1.0])
        self._scale = PiecewiseLinear(np.asarray(self.scale_times, float), np.asarray(self.scale_values, float))
        if abs(self._scale(0.0) - 1.0) > 1e-14:
            raise ValueError("scale must equal 1 at t = 0")
        if np.any(self._scale.values <= 0):
            raise ValueError("scale must stay positive")

    @classmethod
    def linear(cls, center, radius, final_time, end_center):
        """Straight path from ``center`` to ``end_center`` over ``[0, final_time]``."""
        return cls(center, radius, [0.0, final_time], [center, end_center])

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    def translation(self, t):
        return self._translation(t)

    def scale(self, t):
        return self._scale(t)

    def jacobian_det(self, t):
        return self.scale(t) ** 2

    def breakpoints(self) -> np.ndarray:
        return np.union1d(self.times, self._scale.breakpoints)

    def _check_time(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * max(1.0, self.final_time)
        if np.any(t < -tol) or np.any(t > self.final_time + tol):
            raise ValueError(f"time outside [0, {self.final_time}]")
        return t

    def map_point(self, t, xhat):
        """Image ``X(t, xhat)`` of reference point(s) ``xhat`` at scalar time ``t``."""
        t = self._check_time(t)
        return self.translation(t) + self.scale(t) * np.asarray(xhat, dtype=float)

    def quadrature(self, refinement: int) -> QuadratureRule:
        """Disk rule on the reference domain (centered at the initial barycenter)."""
        return disk_quadrature(self.radius, refinement, self.center)

    def mapped_nodes(self, t, rule: QuadratureRule):
        return self.map_point(t, rule.nodes)

    def contained_in(self, inside: Callable[[np.ndarray], np.ndarray], rule: QuadratureRule, times) -> bool:
        return all(bool(np.all(inside(self.mapped_nodes(t, rule)))) for t in np.atleast_1d(times))


@dataclass
class TargetField:
    """Target force ``f(t, x)``; ``breakpoints`` mark jumps in time."""

    sampler: Callable[[float, np.ndarray], np.ndarray]
    description: str = ""
    breakpoints: Sequence[float] = ()

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.sampler(t, x), dtype=float), x.shape)

    @classmethod
    def constant(cls, vector):
        vec = np.asarray(vector, dtype=float)
        return cls(lambda t, x: vec, description=f"constant {vec.tolist()}")

    @classmethod
    def piecewise_constant(cls, switch_times, vectors):
        """``vectors[k]`` on ``[switch_times[k-1], switch_times[k])``, the last one afterwards."""
        switch_times = np.asarray(switch_times, dtype=float)
        vectors = np.asarray(vectors, dtype=float)
        if len(vectors) != len(switch_times) + 1:
            raise ValueError("need one more vector than switch times")

        def sampler(t, x):
            return vectors[int(np.searchsorted(switch_times, t, side="right"))]

        return cls(sampler, description="piecewise constant", breakpoints=tuple(switch_times))


def disk_quadrature(radius: float, refinement: int, center=(0.0, 0.0)) -> QuadratureRule:
    """Centroid rule on a structured triangulation of a disk.

    Starts from four triangles spanning the inscribed square and splits every
    triangle into four per level, pushing new boundary points onto the circle.
    Weights are rescaled so that the rule integrates constants exactly.
    """
    if refinement < 1:
        raise ValueError("refinement must be at least 1")
    verts, tris = _disk_triangulation(refinement)
    p = verts[tris]
    area = 0.5 * np.abs(
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )
    weights = area * (np.pi / area.sum()) * radius**2
    nodes = p.mean(axis=1) * radius + np.asarray(center, dtype=float)
    return QuadratureRule(nodes=nodes, weights=weights)


def _disk_triangulation(levels: int):
    verts = [np.zeros(2), np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([-1.0, 0.0]), np.array([0.0, -1.0])]
    on_circle = [False, True, True, True, True]
    tris = [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 1)]
    for _ in range(levels):
        mids: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in mids:
                m = 0.5 * (verts[a] + verts[b])
                boundary = on_circle[a] and on_circle[b]
                if boundary:
                    m = m / np.linalg.norm(m)
                verts.append(m)
                on_circle.append(boundary)
                mids[key] = len(verts) - 1
            return mids[key]

        new = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        tris = new
    return np.array(verts), np.array(tris)


def time_averaged_target(f: TargetField, n: int, tau: float, dom: MovingDomain, rule: QuadratureRule):
    """Average over ``[t_{n-1}, t_n]`` of ``f(t, X(t, x_q)) * scale(t)`` at every node.

    The step is split at jumps of ``f`` and at knots of the domain motion, and
    each piece is integrated with 3-point Gauss-Legendre.
    """
    t0, t1 = (n - 1) * tau, n * tau
    cuts = [t0, t1]
    for b in list(f.breakpoints) + list(dom.breakpoints()):
        if t0 < b < t1:
            cuts.append(float(b))
    cuts = np.unique(cuts)
    acc = np.zeros_like(rule.nodes)
    for a, b in zip(cuts[:-1], cuts[1:]):
        half = 0.5 * (b - a)
        mid = 0.5 * (a + b)
        for xi, w in zip(_GAUSS3_NODES, _GAUSS3_WEIGHTS):
            t = mid + half * xi
            x = dom.map_point(t, rule.nodes)
            acc += w * half * f(t, x) * dom.scale(t)
    return acc / tau
