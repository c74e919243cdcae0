"""Linear triangular finite elements on structured 2-D meshes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

# local edges of a triangle as vertex-slot pairs
LOCAL_EDGES = ((0, 1), (1, 2), (0, 2))


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        signed = self.signed_areas()
        flip = signed < 0
        if np.any(flip):
            self.triangles[flip] = self.triangles[flip][:, [0, 2, 1]]
        if np.any(np.abs(signed) <= 1e-14 * max(1.0, np.abs(signed).max())):
            raise MeshError("degenerate triangle in mesh")
        if self.boundary is None:
            self.boundary = np.zeros(len(self.vertices), dtype=bool)
            self.boundary[np.unique(self.boundary_edges)] = True
        self.boundary = np.asarray(self.boundary, dtype=bool)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return self.signed_areas()

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique sorted vertex pairs."""
        return np.unique(self._all_edges(), axis=0)

    @cached_property
    def edge_triangles(self) -> list[list[int]]:
        """Triangles adjacent to each entry of :attr:`edges`."""
        all_edges = self._all_edges()
        idx = _row_lookup(self.edges, all_edges)
        adj: list[list[int]] = [[] for _ in range(len(self.edges))]
        for k, e in enumerate(idx):
            adj[e].append(k // 3)
        return adj

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        all_edges = self._all_edges()
        uniq, counts = np.unique(all_edges, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("nonconforming mesh: edge shared by more than two triangles")
        return uniq[counts == 1]

    def _all_edges(self) -> np.ndarray:
        t = self.triangles
        e = np.stack([t[:, [a, b]] for a, b in LOCAL_EDGES], axis=1).reshape(-1, 2)
        return np.sort(e, axis=1)

    @cached_property
    def gradients(self) -> np.ndarray:
        """Constant gradients of the three hat functions per triangle, ``(T, 3, 2)``."""
        p = self.vertices[self.triangles]
        twice = 2.0 * self.areas[:, None]
        g = np.empty((len(p), 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            g[:, i, 0] = (p[:, j, 1] - p[:, k, 1]) / twice[:, 0]
            g[:, i, 1] = (p[:, k, 0] - p[:, j, 0]) / twice[:, 0]
        return g

    @cached_property
    def local_stiffness(self) -> np.ndarray:
        """``|T| grad phi_i . grad phi_j`` per triangle; off-diagonals are the edge weights."""
        g = self.gradients
        return self.areas[:, None, None] * np.einsum("tik,tjk->tij", g, g)

    def max_angle(self) -> float:
        p = self.vertices[self.triangles]
        worst = 0.0
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cos = np.einsum("tk,tk->t", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            worst = max(worst, float(np.arccos(np.clip(cos, -1, 1)).max()))
        return worst

    def is_nonobtuse(self, tol=1e-10) -> bool:
        return self.max_angle() <= np.pi / 2 + tol

    @cached_property
    def pattern(self) -> "Pattern":
        return Pattern(self)


def _row_lookup(table, rows):
    """Index of each row of ``rows`` in the lexicographically sorted ``table``."""
    n = int(max(table.max(), rows.max())) + 1
    keys = table[:, 0] * n + table[:, 1]
    return np.searchsorted(keys, rows[:, 0] * n + rows[:, 1])


class Pattern:
    """CSR sparsity of the vertex graph with a scatter map for element matrices."""

    def __init__(self, mesh: TriMesh):
        t = mesh.triangles
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        n = mesh.n_vertices
        pat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        pat.sum_duplicates()
        pat.sort_indices()
        self.indptr = pat.indptr
        self.indices = pat.indices
        self.shape = (n, n)
        # CSR keys are sorted, so each (row, col) maps to its data slot by bisection
        pat_rows = np.repeat(np.arange(n), np.diff(self.indptr))
        keys = pat_rows * n + self.indices
        self.slots = np.searchsorted(keys, rows * n + cols)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def assemble(self, local) -> sp.csr_matrix:
        """Sum element matrices ``local[t, i, j]`` into a CSR matrix."""
        data = np.bincount(self.slots, weights=np.asarray(local, float).ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


# -- structured generators ---------------------------------------------------


def _tensor_mesh(xs, ys, keep=None) -> TriMesh:
    """Split every kept cell of the tensor grid ``xs x ys`` into two right triangles."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    nx, ny = len(xs) - 1, len(ys) - 1
    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ci, cj = ci.ravel(), cj.ravel()
    if keep is not None:
        xc = 0.5 * (xs[ci] + xs[ci + 1])
        yc = 0.5 * (ys[cj] + ys[cj + 1])
        mask = keep(xc, yc)
        ci, cj = ci[mask], cj[mask]

    def vid(i, j):
        return i * (ny + 1) + j

    v00, v10 = vid(ci, cj), vid(ci + 1, cj)
    v01, v11 = vid(ci, cj + 1), vid(ci + 1, cj + 1)
    tris = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel()], 1)
    used = np.unique(tris)
    renum = np.full(len(verts), -1)
    renum[used] = np.arange(len(used))
    return TriMesh(verts[used], renum[tris])


def _divisions(length, h):
    return max(1, int(np.ceil(length / h - 1e-9)))


def _lines(breaks, h):
    pts = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        pts.extend(np.linspace(a, b, _divisions(b - a, h) + 1)[1:])
    return np.array(pts)


def rectangle_mesh(x0, x1, y0, y1, h) -> TriMesh:
    if h <= 0:
        raise MeshError("mesh size must be positive")
    return _tensor_mesh(_lines([x0, x1], h), _lines([y0, y1], h))


def rotated_rect_mesh(width, height, angle, h, center=(0.0, 0.0)) -> TriMesh:
    """Rectangle ``[-w/2, w/2] x [-h/2, h/2]`` rotated counterclockwise by ``angle``."""
    mesh = rectangle_mesh(-width / 2, width / 2, -height / 2, height / 2, h)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return TriMesh(mesh.vertices @ rot.T + np.asarray(center, float), mesh.triangles, mesh.boundary)


def square_minus_slot_mesh(outer, slot, h) -> TriMesh:
    """Box ``outer = (x0, x1, y0, y1)`` with the box ``slot`` removed.

    Grid lines follow the slot edges so that every cell is either inside or
    outside the slot.
    """
    x0, x1, y0, y1 = outer
    sx0, sx1, sy0, sy1 = slot
    if not (x0 <= sx0 < sx1 <= x1 and y0 <= sy0 < sy1 <= y1):
        raise MeshError("slot is not contained in the outer box")
    if (sx0, sx1, sy0, sy1) == (x0, x1, y0, y1):
        raise MeshError("slot removes the whole box")
    xs = _lines(sorted({x0, sx0, sx1, x1}), h)
    ys = _lines(sorted({y0, sy0, sy1, y1}), h)

    def keep(xc, yc):
        return ~((xc > sx0) & (xc < sx1) & (yc > sy0) & (yc < sy1))

    return _tensor_mesh(xs, ys, keep)


def disk_mesh(center, radius, h) -> TriMesh:
    """Disk triangulated by repeated midpoint refinement of four triangles."""
    from magsteer.domain import _disk_triangulation

    levels = max(1, int(np.ceil(np.log2(radius * np.sqrt(2) / h))))
    verts, tris = _disk_triangulation(levels)
    return TriMesh(verts * radius + np.asarray(center, float), tris)


def generate_mesh(spec: dict) -> TriMesh:
    """Build a mesh from a declarative description.

    ``spec["kind"]`` is one of ``rectangle``, ``rotated_rect``,
    ``square_minus_slot`` or ``disk``; the remaining keys are passed to the
    matching generator.  ``h`` is the target mesh size.
    """
    kind = spec.get("kind")
    h = float(spec.get("h", 0))
    if h <= 0:
        raise MeshError("mesh size h must be positive")
    if kind == "rectangle":
        x0, x1, y0, y1 = spec.get("box", (0.0, 1.0, 0.0, 1.0))
        return rectangle_mesh(x0, x1, y0, y1, h)
    if kind == "rotated_rect":
        return rotated_rect_mesh(spec["width"], spec["height"], spec.get("angle", 0.0), h, spec.get("center", (0, 0)))
    if kind == "square_minus_slot":
        return square_minus_slot_mesh(spec["outer"], spec["slot"], h)
    if kind == "disk":
        return disk_mesh(spec.get("center", (0.0, 0.0)), spec["radius"], h)
    raise MeshError(f"unknown mesh kind {kind!r}")


# -- assembly ----------------------------------------------------------------


def assemble_mass(mesh: TriMesh) -> sp.csr_matrix:
    local = mesh.areas[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))
    return mesh.pattern.assemble(local)


def assemble_stiffness(mesh: TriMesh, eps: float = 1.0) -> sp.csr_matrix:
    return mesh.pattern.assemble(eps * mesh.local_stiffness)


def lumped_mass(M) -> np.ndarray:
    """Row sums of ``M`` (the diagonal of the lumped mass matrix)."""
    return np.asarray(M.sum(axis=1)).ravel()


# -- mesh text format --------------------------------------------------------
#
#   <n_vertices>
#   x y                      (one line per vertex)
#   <n_triangles>
#   i j k                    (zero-based vertex indices)
#   b_0 b_1 ... b_{n-1}      (boundary markers, 0 or 1)


def write_mesh(mesh: TriMesh, path) -> None:
    lines = [str(mesh.n_vertices)]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines.append(str(len(mesh.triangles)))
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(" ".join("1" if b else "0" for b in mesh.boundary))
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> TriMesh:
    tokens = Path(path).read_text().split("\n")
    tokens = [t.strip() for t in tokens if t.strip()]
    try:
        nv = int(tokens[0])
        verts = np.array([[float(v) for v in t.split()] for t in tokens[1 : 1 + nv]])
        nt = int(tokens[1 + nv])
        tris = np.array([[int(v) for v in t.split()] for t in tokens[2 + nv : 2 + nv + nt]])
        marks = np.array([int(v) for v in tokens[2 + nv + nt].split()], dtype=bool)
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if verts.shape != (nv, 2) or tris.shape != (nt, 3) or marks.shape != (nv,):
        raise MeshError(f"malformed mesh file {path}: inconsistent counts")
    if tris.min() < 0 or tris.max() >= nv:
        raise MeshError(f"malformed mesh file {path}: vertex index out of range")
    return TriMesh(verts, tris, marks)
