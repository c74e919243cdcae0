"""Readers and writers for controls, logs, force samples and concentration snapshots."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from magsteer.magnetics import DIRECTION, DipoleConfig, eval_field
from magsteer.objective import ControlTrajectory


class ControlsFileError(ValueError):
    pass


def control_columns(config: DipoleConfig) -> list[str]:
    second = "theta" if config.mode == DIRECTION else "phi"
    n = config.n
    return ["t"] + [f"alpha_{i + 1}" for i in range(n)] + [f"{second}_{i + 1}" for i in range(n)]


def write_controls(path, traj: ControlTrajectory, config: DipoleConfig) -> None:
    """One row per time node; 17 significant digits so the file reads back bit-exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(control_columns(config))
        for t, row in zip(traj.times, traj.values):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])


def read_controls(path, config: DipoleConfig | None = None) -> ControlTrajectory:
    """Parse a controls file written by :func:`write_controls`.

    Times must start at 0 and be uniformly spaced; with ``config`` the column
    count is checked as well.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise ControlsFileError(f"{path}: {exc}") from exc
    if len(rows) < 3:
        raise ControlsFileError(f"{path}: need a header and at least two time nodes, found {max(len(rows) - 1, 0)}")
    header, body = rows[0], rows[1:]
    if config is not None and header != control_columns(config):
        raise ControlsFileError(f"{path}: columns {header} do not match the dipole configuration")
    try:
        data = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise ControlsFileError(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ControlsFileError(f"{path}: ragged rows")
    t = data[:, 0]
    tau = t[1] - t[0]
    if t[0] != 0.0 or tau <= 0 or np.max(np.abs(np.diff(t) - tau)) > 1e-9 * max(1.0, t[-1]):
        raise ControlsFileError(f"{path}: time column must start at 0 with uniform spacing")
    return ControlTrajectory(data[:, 1:], (t[-1] - t[0]) / (len(t) - 1))


class JsonLinesLog:
    """Append-only log with one JSON object per line."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w")

    def write(self, **record):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_force_grid(path, config: DipoleConfig, traj: ControlTrajectory, box, n=21, times=None) -> None:
    """Kelvin force on an ``n x n`` grid over ``box = (x0, x1, y0, y1)`` at the given times."""
    x0, x1, y0, y1 = box
    gx, gy = np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n), indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    times = traj.times if times is None else np.asarray(times, float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "fx", "fy", "magnitude"])
        for t in times:
            kel = eval_field(config, traj.interval_at(t), pts).kelvin
            mag = np.linalg.norm(kel, axis=1)
            for p, f, m in zip(pts, kel, mag):
                w.writerow([f"{t:.17g}", f"{p[0]:.17g}", f"{p[1]:.17g}", f"{f[0]:.17g}", f"{f[1]:.17g}", f"{m:.17g}"])


def write_vtk(path, mesh, values, name="concentration", time=None) -> None:
    """Legacy ASCII VTK unstructured grid with one point-data scalar."""
    values = np.asarray(values, dtype=float)
    nv, nt = mesh.n_vertices, len(mesh.triangles)
    title = f"{name}" + ("" if time is None else f" t={time:.17g}")
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    out += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    out.append(f"CELLS {nt} {4 * nt}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    out.append(f"CELL_TYPES {nt}")
    out += ["5"] * nt
    out += [f"POINT_DATA {nv}", f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
    out += [f"{v:.17g}" for v in values]
    Path(path).write_text("\n".join(out) + "\n")


def write_diagnostics(path, result) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mass", "min", "max", "com_x", "com_y"])
        for row in result.diagnostics():
            w.writerow([f"{v:.17g}" for v in row])
