"""Drift-diffusion transport of a particle concentration under a Kelvin force.

The concentration obeys ``c_t + div(-eps grad c + c grad|h|^2) = 0``.  Two
schemes are provided: an implicit Euler step with edge-averaged (exponentially
fitted) finite elements, which is monotone on nonobtuse meshes, and an explicit
Euler step for P1 Galerkin with a corrected lumped mass inverse.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, bicgstab

from magsteer.fem import LOCAL_EDGES, TriMesh, assemble_mass, lumped_mass
from magsteer.magnetics import DipoleConfig, eval_field

log = logging.getLogger(__name__)

NEUMANN = "neumann"
DIRICHLET = "dirichlet"
IMPLICIT = "eafe-implicit"
EXPLICIT = "explicit-lumped"


class TransportError(RuntimeError):
    pass


class SolverError(TransportError):
    """Linear solve did not reach its tolerance; ``history`` holds relative residuals."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class StabilityError(TransportError):
    pass


# -- exponential fitting -------------------------------------------------------


def bernoulli(s):
    """``B(s) = s / (e^s - 1)`` without overflow or cancellation."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    small = np.abs(s) < 1e-3
    pos = s >= 1e-3
    neg = s <= -1e-3
    z = s[small]
    out[small] = 1.0 - z / 2.0 + z * z / 12.0 - z**4 / 720.0
    z = s[pos]
    out[pos] = z * np.exp(-z) / (-np.expm1(-z))
    z = s[neg]
    out[neg] = z / np.expm1(z)
    return out if out.ndim else float(out)


def eafe_edge_coefficient(psi_i, psi_j, eps):
    """Edge weights multiplying ``c_i`` and ``c_j`` in the fitted flux along edge ``i -> j``.

    Equal to the harmonic edge average of ``eps e^{-psi}`` times ``e^{psi_i}``
    and ``e^{psi_j}`` for ``psi`` linear on the edge, without forming ``e^psi``.
    """
    s = np.asarray(psi_j, dtype=float) - np.asarray(psi_i, dtype=float)
    return eps * bernoulli(s), eps * bernoulli(-s)


def assemble_eafe(mesh: TriMesh, potential, eps: float) -> sp.csr_matrix:
    """Edge-averaged operator ``K`` with ``v^T K c = B_h(c, v)``.

    ``potential`` holds nodal values of ``|h|^2``; the fitting exponent is
    ``psi = -potential / eps``.  Columns of ``K`` sum to zero, so the operator
    conserves mass under zero-flux boundary conditions.
    """
    if eps <= 0:
        raise ValueError("diffusion coefficient must be positive")
    if not mesh.is_nonobtuse():
        log.warning("mesh has obtuse triangles; the edge-averaged scheme may lose monotonicity")
    psi = -np.asarray(potential, dtype=float) / eps
    tri = mesh.triangles
    local = np.zeros((len(tri), 3, 3))
    for a, b in LOCAL_EDGES:
        omega = mesh.local_stiffness[:, a, b]
        wi, wj = eafe_edge_coefficient(psi[tri[:, a]], psi[tri[:, b]], eps)
        local[:, a, a] -= omega * wi
        local[:, a, b] += omega * wj
        local[:, b, a] += omega * wi
        local[:, b, b] -= omega * wj
    return mesh.pattern.assemble(local)


def assemble_drift_galerkin(mesh: TriMesh, force, eps: float) -> sp.csr_matrix:
    """Galerkin matrix of ``a(c, v) = (eps grad c - c F, grad v)`` with ``F`` nodal P1."""
    F = np.asarray(force, dtype=float)[mesh.triangles]  # (T, 3, 2)
    weighted = (mesh.areas / 12.0)[:, None, None] * (F + F.sum(axis=1, keepdims=True))
    conv = np.einsum("tik,tjk->tij", mesh.gradients, weighted)
    return mesh.pattern.assemble(eps * mesh.local_stiffness - conv)


# -- linear algebra ------------------------------------------------------------


def solve_bicgstab(A, b, x0=None, tol=1e-10, max_iter=2000, restarts=5):
    """Jacobi-preconditioned BiCGStab; returns ``(x, relative residual history)``.

    A breakdown (negative ``info``) restarts the iteration from the last
    iterate, at most ``restarts`` times, within the overall ``max_iter`` budget.
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), [0.0]
    diag = A.diagonal()
    if np.any(diag == 0):
        raise SolverError("zero on the diagonal; Jacobi preconditioner undefined")
    precond = LinearOperator(A.shape, matvec=lambda r: r / diag, dtype=float)
    history = []

    def record(xk):
        history.append(float(np.linalg.norm(b - A @ xk) / bnorm))

    x = x0
    for _ in range(restarts + 1):
        budget = max_iter - len(history)
        if budget <= 0:
            break
        x, info = bicgstab(A, b, x0=x, rtol=tol, atol=0.0, maxiter=budget, M=precond, callback=record)
        if info >= 0:
            break
        log.debug("BiCGStab breakdown after %d iterations; restarting", len(history))
    final = float(np.linalg.norm(b - A @ x) / bnorm)
    if info != 0 or final > 10 * tol:
        raise SolverError(f"BiCGStab stopped with info={info}, relative residual {final:.3e}", history)
    return x, history


def corrected_lumped_inverse(M, mbar, z):
    """``(I + B_r) Mbar^{-1} z`` with ``B_r = Mbar^{-1}(Mbar - M)``, i.e. ``2 Mbar^{-1} z - Mbar^{-1} M Mbar^{-1} z``."""
    y = z / mbar
    return 2.0 * y - (M @ y) / mbar


# -- time stepping ---------------------------------------------------------------


def implicit_step(M, K, c_prev, dt, boundary=None, tol=1e-10, max_iter=2000):
    """Solve ``(M + dt K) c = M c_prev``; rows of ``boundary`` vertices become ``c = 0``.

    ``M`` may be a sparse matrix or a vector holding a diagonal (lumped) mass.
    Returns ``(c, residual history)``.
    """
    if np.ndim(M) == 1:
        system = sp.diags(M) + dt * K
        rhs = M * c_prev
    else:
        system = M + dt * K
        rhs = M @ c_prev
    system = sp.csr_matrix(system)
    if boundary is not None and np.any(boundary):
        keep = sp.diags((~boundary).astype(float))
        system = sp.csr_matrix(keep @ system + sp.diags(boundary.astype(float)))
        rhs = np.where(boundary, 0.0, rhs)
    c, hist = solve_bicgstab(system, rhs, x0=np.asarray(c_prev, float), tol=tol, max_iter=max_iter)
    if boundary is not None:
        c[boundary] = 0.0  # exact, not up to the solver tolerance
    return c, hist


def explicit_step(M, mbar, A, c_prev, dt, boundary=None):
    """``c = c_prev - dt (I + B_r) Mbar^{-1} A c_prev`` with zero values kept on ``boundary``.

    For Dirichlet problems pass ``M`` and ``mbar`` of the interior system
    (boundary rows and columns zeroed, as :func:`run` does).
    """
    z = A @ c_prev
    if boundary is not None:
        z = np.where(boundary, 0.0, z)
    c = c_prev - dt * corrected_lumped_inverse(M, mbar, z)
    if boundary is not None:
        c[boundary] = 0.0
    return c


def stability_limit(A, mbar, interior=None, safety=0.9) -> float:
    """``safety * min_i mbar_ii / sum_j |A_ij|`` over the (interior) rows."""
    absA = abs(A)
    if interior is not None:
        absA = absA @ sp.diags(interior.astype(float))
    rowsum = np.asarray(absA.sum(axis=1)).ravel()
    rows = np.ones(len(mbar), bool) if interior is None else interior
    rows = rows & (rowsum > 0)
    if not rows.any():
        return np.inf
    return safety * float(np.min(mbar[rows] / rowsum[rows]))


# -- drift ---------------------------------------------------------------------------


@dataclass
class DriftField:
    """Nodal ``|h|^2`` and Kelvin force ``grad |h|^2`` at one time."""

    time: float
    potential: np.ndarray
    force: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.potential)) and np.all(np.isfinite(self.force))):
            raise TransportError(f"non-finite drift at t = {self.time}")


class ControlledDrift:
    """Drift produced by a dipole configuration following a control trajectory.

    Controls are interpolated linearly in time, either between the step
    midpoints (``"midpoint"``, see ``ControlTrajectory.interval_at``) or between
    the time nodes (``"nodal"``).
    """

    def __init__(self, config: DipoleConfig, trajectory, vertices, interpolation="midpoint"):
        if interpolation not in ("midpoint", "nodal"):
            raise ValueError(f"unknown interpolation {interpolation!r}")
        self.config = config
        self.trajectory = trajectory
        self.vertices = np.asarray(vertices, dtype=float)
        self.interpolation = interpolation

    def controls(self, t):
        if self.interpolation == "midpoint":
            return self.trajectory.interval_at(t)
        return self.trajectory.at(t)

    def __call__(self, t: float) -> DriftField:
        sample = eval_field(self.config, self.controls(t), self.vertices)
        return DriftField(t, np.sum(sample.h**2, axis=-1), sample.kelvin)


def zero_drift(n_vertices: int) -> Callable[[float], DriftField]:
    def drift(t):
        return DriftField(t, np.zeros(n_vertices), np.zeros((n_vertices, 2)))

    return drift


# -- driver ------------------------------------------------------------------------------


@dataclass
class TransportSettings:
    eps: float
    dt: float
    T: float
    bc: str = NEUMANN
    scheme: str = IMPLICIT
    tol: float = 1e-10
    max_iter: int = 2000
    lumped: bool = True  # implicit scheme: diagonal mass keeps the system an M-matrix
    safety: float = 0.9
    on_unstable: str = "abort"  # or "warn"

    def __post_init__(self):
        if self.eps <= 0 or self.dt <= 0 or self.T <= 0:
            raise ValueError("eps, dt and T must be positive")
        if self.bc not in (NEUMANN, DIRICHLET):
            raise ValueError(f"unknown boundary condition {self.bc!r}")
        if self.scheme not in (IMPLICIT, EXPLICIT):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.on_unstable not in ("abort", "warn"):
            raise ValueError("on_unstable must be 'abort' or 'warn'")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))


@dataclass
class ScalarField:
    values: np.ndarray
    time: float


@dataclass
class TransportResult:
    snapshots: list[ScalarField]
    times: np.ndarray
    mass: np.ndarray
    minimum: np.ndarray
    maximum: np.ndarray
    center: np.ndarray  # (steps + 1, 2)
    iterations: list[int] = field(default_factory=list)

    def diagnostics(self) -> np.ndarray:
        """Columns ``t, mass, min, max, com_x, com_y``."""
        return np.column_stack([self.times, self.mass, self.minimum, self.maximum, self.center])


def gaussian_bump(vertices, center, sigma2):
    """``exp(-|x - center|^2 / sigma2)`` at the vertices."""
    d = np.asarray(vertices, float) - np.asarray(center, float)
    return np.exp(-np.sum(d * d, axis=1) / sigma2)


def run(mesh: TriMesh, settings: TransportSettings, drift, c0, snapshot_times=(), callback=None) -> TransportResult:
    """Advance ``c0`` to ``settings.T`` and record diagnostics after every step.

    ``drift(t)`` returns a :class:`DriftField` on the mesh vertices; it is
    evaluated once per step (end of step for the implicit scheme, start of
    step for the explicit one).  Snapshots are taken at the steps nearest to
    the requested times.
    """
    st = settings
    n_steps = st.n_steps
    dt = st.T / n_steps
    c = np.asarray(c0, dtype=float).copy()
    if c.shape != (mesh.n_vertices,):
        raise ValueError("initial concentration must have one value per vertex")
    boundary = mesh.boundary if st.bc == DIRICHLET else None
    if boundary is not None:
        c[boundary] = 0.0

    M = assemble_mass(mesh)
    weights = lumped_mass(M)  # quadrature weights for the diagnostics
    if st.scheme == EXPLICIT:
        if boundary is not None:
            inner = sp.diags((~boundary).astype(float))
            M_step = sp.csr_matrix(inner @ M @ inner)
            mbar = lumped_mass(M_step)
            mbar[boundary] = 1.0
        else:
            M_step, mbar = M, weights
        interior = None if boundary is None else ~boundary

    snap_steps = {int(round(ts / dt)): ts for ts in snapshot_times}
    if any(k < 0 or k > n_steps for k in snap_steps):
        raise ValueError("snapshot time outside [0, T]")

    times = dt * np.arange(n_steps + 1)
    mass = np.empty(n_steps + 1)
    lo = np.empty(n_steps + 1)
    hi = np.empty(n_steps + 1)
    com = np.empty((n_steps + 1, 2))
    snapshots = []
    iterations = []

    def record(n):
        m = float(weights @ c)
        mass[n] = m
        lo[n], hi[n] = c.min(), c.max()
        com[n] = (weights * c) @ mesh.vertices / m if m != 0 else np.nan
        if n in snap_steps:
            snapshots.append(ScalarField(c.copy(), times[n]))

    record(0)
    for n in range(1, n_steps + 1):
        if st.scheme == IMPLICIT:
            d = drift(times[n])
            K = assemble_eafe(mesh, d.potential, st.eps)
            mass_op = weights if st.lumped else M
            try:
                c, hist = implicit_step(mass_op, K, c, dt, boundary, st.tol, st.max_iter)
            except SolverError as exc:
                raise SolverError(f"step {n} (t = {times[n]:.6g}): {exc}", exc.history) from exc
            iterations.append(len(hist))
        else:
            d = drift(times[n - 1])
            A = assemble_drift_galerkin(mesh, d.force, st.eps)
            limit = stability_limit(A, mbar, interior, st.safety)
            if dt > limit:
                msg = f"step {n}: dt = {dt:.3e} exceeds the explicit stability limit {limit:.3e}"
                if st.on_unstable == "abort":
                    raise StabilityError(msg)
                log.warning(msg)
            c = explicit_step(M_step, mbar, A, c, dt, boundary)
        if not np.all(np.isfinite(c)):
            raise TransportError(f"non-finite concentration at step {n}")
        record(n)
        if callback is not None:
            callback(n, times[n], c)
    return TransportResult(snapshots, times, mass, lo, hi, com, iterations)
