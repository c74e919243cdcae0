"""Point-dipole superposition fields in two dimensions.

Each source ``i`` contributes ``alpha_i * M_i(x) d_i`` with

    M_i(x) = (2 r r^T / |r|^2 - I) / |r|^2,    r = x - x_i,

and the Kelvin force of the total field is ``grad |h|^2 = 2 (grad h)^T h``.
Everything here is vectorized over leading point/time axes; no state is kept
between calls.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DIM = 2
DELTA_MIN = 1e-6

DIRECTION = "direction"
POSITION = "position"


class ProximityError(ValueError):
    """Raised when a field is sampled closer than ``DELTA_MIN`` to a source."""


@dataclass(frozen=True)
class CircleCurve:
    """Source trajectory ``center + radius * (cos phi, sin phi)``."""

    radius: float = 1.2
    center: tuple[float, float] = (0.0, 0.0)

    def __call__(self, phi):
        phi = np.asarray(phi, dtype=float)
        return np.stack(
            [self.center[0] + self.radius * np.cos(phi), self.center[1] + self.radius * np.sin(phi)],
            axis=-1,
        )

    def derivative(self, phi):
        phi = np.asarray(phi, dtype=float)
        return np.stack([-self.radius * np.sin(phi), self.radius * np.cos(phi)], axis=-1)


@dataclass
class Dipole:
    position: np.ndarray | None = None
    direction_angle: float = 0.0
    intensity: float = 0.0
    trajectory: CircleCurve | None = None

    def direction(self) -> np.ndarray:
        return unit_direction(self.direction_angle)


@dataclass
class DipoleConfig:
    """Geometry of ``n_p`` sources plus box bounds and initial value of the controls.

    Controls at one time are stored as a flat vector ``[alpha_1..alpha_n, c_1..c_n]``
    where ``c`` holds angles (direction mode) or curve parameters (position mode).
    """

    dipoles: list[Dipole]
    mode: str = DIRECTION
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    initial: np.ndarray | None = None
    _positions: np.ndarray = field(init=False, repr=False)
    _angles: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in (DIRECTION, POSITION):
            raise ValueError(f"unknown control mode {self.mode!r}")
        n = len(self.dipoles)
        if n == 0:
            raise ValueError("at least one dipole is required")
        if self.mode == POSITION:
            if any(d.trajectory is None for d in self.dipoles):
                raise ValueError("position mode needs a trajectory curve for every dipole")
            self._positions = np.zeros((n, DIM))
        else:
            if any(d.position is None for d in self.dipoles):
                raise ValueError("direction mode needs a fixed position for every dipole")
            self._positions = np.array([np.asarray(d.position, float) for d in self.dipoles])
        self._angles = np.array([d.direction_angle for d in self.dipoles], dtype=float)

        if self.initial is None:
            second = [d.direction_angle for d in self.dipoles]
            self.initial = np.array([d.intensity for d in self.dipoles] + second, dtype=float)
        self.initial = np.asarray(self.initial, dtype=float)
        self.lower = np.full(2 * n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(2 * n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        for name, arr in (("initial", self.initial), ("lower", self.lower), ("upper", self.upper)):
            if arr.shape != (2 * n,):
                raise ValueError(f"{name} must have length {2 * n}, got {arr.shape}")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if np.any(self.initial < self.lower) or np.any(self.initial > self.upper):
            raise ValueError("initial controls violate the bounds")

    @property
    def n(self) -> int:
        return len(self.dipoles)

    @property
    def curves(self) -> list[CircleCurve]:
        return [d.trajectory for d in self.dipoles]

    def split(self, controls):
        controls = np.asarray(controls, dtype=float)
        return controls[..., : self.n], controls[..., self.n :]

    def geometry(self, second):
        """Source positions and unit directions for the second control block.

        ``second`` has shape ``(..., n)``; the result arrays have shape ``(..., n, 2)``
        (fixed quantities are returned unbroadcast as ``(n, 2)``).
        """
        second = np.asarray(second, dtype=float)
        if self.mode == DIRECTION:
            return self._positions, unit_direction(second)
        pos = np.stack([c(second[..., i]) for i, c in enumerate(self.curves)], axis=-2)
        return pos, unit_direction(self._angles)

    def curve_derivatives(self, phi):
        phi = np.asarray(phi, dtype=float)
        return np.stack([c.derivative(phi[..., i]) for i, c in enumerate(self.curves)], axis=-2)


@dataclass
class FieldSample:
    h: np.ndarray
    jacobian: np.ndarray  # [..., a, k] = d h_a / d x_k
    kelvin: np.ndarray


def unit_direction(theta):
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def unit_direction_derivative(theta):
    theta = np.asarray(theta, dtype=float)
    return np.stack([-np.sin(theta), np.cos(theta)], axis=-1)


def dipole_terms(x, sources, dirs, order=1):
    """Per-source field ``M_i d_i`` and its spatial derivatives.

    ``x`` has shape ``(..., 2)``; ``sources`` and ``dirs`` broadcast against
    ``(..., n, 2)``.  Returns ``v[..., i, a]``, ``dv[..., i, a, k]`` and, for
    ``order=2``, ``ddv[..., i, a, k, j]``.
    """
    x = np.asarray(x, dtype=float)
    r = x[..., None, :] - np.asarray(sources, dtype=float)
    d = np.broadcast_to(np.asarray(dirs, dtype=float), r.shape)
    p = np.einsum("...a,...a->...", r, r)
    if np.any(p < DELTA_MIN**2):
        raise ProximityError(
            f"field sampled within {DELTA_MIN:g} of a source (min distance {np.sqrt(p.min()):.3g})"
        )
    s = np.einsum("...a,...a->...", r, d)
    ip = 1.0 / p
    ip2 = ip * ip
    ip3 = ip2 * ip
    eye = np.eye(DIM)

    v = (2.0 * s * ip2)[..., None] * r - ip[..., None] * d
    rr = r[..., :, None] * r[..., None, :]
    dv = (
        2.0 * ip2[..., None, None] * (r[..., :, None] * d[..., None, :] + d[..., :, None] * r[..., None, :])
        + (2.0 * s * ip2)[..., None, None] * eye
        - (8.0 * s * ip3)[..., None, None] * rr
    )
    if order < 2:
        return v, dv

    # second derivatives; symmetric in (k, j)
    s_ = s[..., None, None, None]
    ip2_ = ip2[..., None, None, None]
    ip3_ = ip3[..., None, None, None]
    ip4_ = (ip2 * ip2)[..., None, None, None]
    ra = r[..., :, None, None]
    rk = r[..., None, :, None]
    rj = r[..., None, None, :]
    da = d[..., :, None, None]
    dk = d[..., None, :, None]
    dj = d[..., None, None, :]
    d_ak = eye[:, :, None]
    d_aj = eye[:, None, :]
    d_kj = eye[None, :, :]
    ddv = (
        2.0 * ip2_ * (dk * d_aj + dj * d_ak + da * d_kj)
        - 8.0 * ip3_ * (dk * ra * rj + dj * ra * rk + da * rk * rj)
        - 8.0 * s_ * ip3_ * (d_ak * rj + d_aj * rk + ra * d_kj)
        + 48.0 * s_ * ip4_ * ra * rk * rj
    )
    return v, dv, ddv


def _combine(alpha, v, dv):
    h = np.einsum("...i,...ia->...a", alpha, v)
    jac = np.einsum("...i,...iak->...ak", alpha, dv)
    kelvin = 2.0 * np.einsum("...a,...ak->...k", h, jac)
    return h, jac, kelvin


def eval_field(config: DipoleConfig, controls, x) -> FieldSample:
    """Field, Jacobian and Kelvin force of the superposition at point(s) ``x``."""
    alpha, second = config.split(controls)
    sources, dirs = config.geometry(second)
    v, dv = dipole_terms(x, sources, dirs)
    return FieldSample(*_combine(alpha, v, dv))


def field_from_sources(alpha, sources, dirs, x) -> FieldSample:
    """Same as :func:`eval_field` for explicitly given source geometry."""
    v, dv = dipole_terms(x, sources, dirs)
    return FieldSample(*_combine(np.asarray(alpha, float), v, dv))


def _quadratic_forms(v, dv):
    # B_k = d/dx_k (D^T D) = dD_k^T D + D^T dD_k
    bk = np.einsum("...iak,...ja->...kij", dv, v)
    return bk + np.swapaxes(bk, -1, -2)


def b_matrices(config: DipoleConfig, theta, x) -> np.ndarray:
    """Matrices ``B_k(theta)`` at ``x`` with ``kelvin_k = alpha^T B_k alpha``.

    Returns an array of shape ``(..., 2, n, n)``.
    """
    if config.mode != DIRECTION:
        raise ValueError("b_matrices requires a direction-mode configuration")
    positions, dirs = config.geometry(theta)
    v, dv = dipole_terms(x, positions, dirs)
    return _quadratic_forms(v, dv)


def g_matrices(config: DipoleConfig, phi, x) -> np.ndarray:
    """Matrices ``G_k(phi)`` for sources placed on their curves at ``phi``."""
    if config.mode != POSITION:
        raise ValueError("g_matrices requires a position-mode configuration")
    positions, dirs = config.geometry(phi)
    v, dv = dipole_terms(x, positions, dirs)
    return _quadratic_forms(v, dv)


def min_source_distance(config: DipoleConfig, controls, points) -> float:
    _, second = config.split(controls)
    sources, _ = config.geometry(second)
    r = np.asarray(points, float)[..., None, :] - sources
    return float(np.sqrt(np.min(np.einsum("...a,...a->...", r, r))))


def fixed_position_config(config: DipoleConfig, phi: Sequence[float]) -> DipoleConfig:
    """Direction-mode twin of a position-mode config with sources frozen at ``phi``."""
    positions, _ = config.geometry(np.asarray(phi, float))
    dipoles = [
        Dipole(position=positions[i], direction_angle=d.direction_angle, intensity=d.intensity)
        for i, d in enumerate(config.dipoles)
    ]
    n = config.n
    angles = np.array([d.direction_angle for d in config.dipoles])
    return DipoleConfig(
        dipoles,
        mode=DIRECTION,
        lower=np.concatenate([config.lower[:n], angles]),
        upper=np.concatenate([config.upper[:n], angles]),
        initial=np.concatenate([config.initial[:n], angles]),
    )
