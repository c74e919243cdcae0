"""Declarative experiment descriptions.

A scenario is a YAML file with the sections ``dipoles``, ``domain``,
``target``, ``objective``, ``discretization``, ``optimizer`` and optionally
``pde``.  Numbers may be written as arithmetic strings using ``pi``
(e.g. ``"3*pi/2"``).  See the README for the full schema.
"""
from __future__ import annotations

import ast
import copy
import operator
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from magsteer.domain import MovingDomain, TargetField
from magsteer.fem import MeshError, TriMesh, generate_mesh
from magsteer.magnetics import DIRECTION, POSITION, CircleCurve, Dipole, DipoleConfig
from magsteer.objective import ObjectiveConfig, TrackingProblem
from magsteer.optimize import OptimizerSettings
from magsteer.transport import DIRICHLET, EXPLICIT, IMPLICIT, NEUMANN, TransportSettings


class ScenarioError(ValueError):
    """Invalid scenario; the message names the offending field."""


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv, ast.Pow: operator.pow}


def _eval_expr(node):
    if isinstance(node, ast.Expression):
        return _eval_expr(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name) and node.id == "pi":
        return float(np.pi)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_expr(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_expr(node.left), _eval_expr(node.right))
    raise ValueError("unsupported expression")


def _num(value, where) -> float:
    if isinstance(value, bool):
        raise ScenarioError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return _eval_expr(ast.parse(value, mode="eval"))
        except (SyntaxError, ValueError, ZeroDivisionError):
            pass
    raise ScenarioError(f"{where}: expected a number, got {value!r}")


def _vec(value, where, length=None) -> np.ndarray:
    if not isinstance(value, (list, tuple)):
        raise ScenarioError(f"{where}: expected a list")
    out = np.array([_num(v, f"{where}[{i}]") for i, v in enumerate(value)])
    if length is not None and len(out) != length:
        raise ScenarioError(f"{where}: expected {length} entries, got {len(out)}")
    return out


def _points(value, where) -> np.ndarray:
    if not isinstance(value, (list, tuple)) or not value:
        raise ScenarioError(f"{where}: expected a list of points")
    return np.array([_vec(p, f"{where}[{i}]", 2) for i, p in enumerate(value)])


def _section(data, key, required=True, where=None) -> dict:
    where = where or key
    sec = data.get(key)
    if sec is None:
        if required:
            raise ScenarioError(f"{where}: missing section")
        return {}
    if not isinstance(sec, dict):
        raise ScenarioError(f"{where}: expected a mapping")
    return sec


def _get(sec, key, where, default=...):
    if key in sec:
        return sec[key]
    if default is ...:
        raise ScenarioError(f"{where}.{key}: missing")
    return default


def _positive(value, where) -> float:
    v = _num(value, where)
    if not v > 0:
        raise ScenarioError(f"{where}: must be positive, got {v}")
    return v


@dataclass
class PdeSpec:
    mesh: dict
    settings: TransportSettings
    center: np.ndarray
    sigma2: float
    snapshots: list[float]
    interpolation: str = "midpoint"


@dataclass
class Scenario:
    name: str
    config: DipoleConfig
    domain: MovingDomain
    target: TargetField
    weights: ObjectiveConfig
    N: int
    T: float
    refinement: int
    optimizer: OptimizerSettings
    init_tol: float
    kappa: float | None
    force_grid: dict
    pde: PdeSpec | None
    output: str | None
    raw: dict

    def problem(self, workers: int = 1) -> TrackingProblem:
        rule = self.domain.quadrature(self.refinement)
        return TrackingProblem(self.config, self.domain, rule, self.target, self.N, self.T, self.weights, workers)

    def mesh(self) -> TriMesh:
        if self.pde is None:
            raise ScenarioError("pde: section required for simulation")
        return generate_mesh(self.pde.mesh)


def _dipoles(data) -> DipoleConfig:
    sec = _section(data, "dipoles")
    mode = _get(sec, "mode", "dipoles")
    if mode not in (DIRECTION, POSITION):
        raise ScenarioError(f"dipoles.mode: expected 'direction' or 'position', got {mode!r}")
    if mode == DIRECTION:
        pos = _points(_get(sec, "positions", "dipoles"), "dipoles.positions")
        n = len(pos)
        dipoles = [Dipole(position=p) for p in pos]
    else:
        dirs = _vec(_get(sec, "directions", "dipoles"), "dipoles.directions")
        n = len(dirs)
        curve = CircleCurve(_positive(_get(sec, "curve_radius", "dipoles", 1.2), "dipoles.curve_radius"))
        dipoles = [Dipole(trajectory=curve, direction_angle=a) for a in dirs]
    blocks = {}
    for key in ("initial", "lower", "upper"):
        part = _section(sec, key, where=f"dipoles.{key}")
        blocks[key] = np.concatenate(
            [_vec(_get(part, "alpha", f"dipoles.{key}"), f"dipoles.{key}.alpha", n),
             _vec(_get(part, "angle", f"dipoles.{key}"), f"dipoles.{key}.angle", n)]
        )
    try:
        return DipoleConfig(dipoles, mode=mode, **blocks)
    except ValueError as exc:
        raise ScenarioError(f"dipoles: {exc}") from exc


def _domain(data) -> MovingDomain:
    sec = _section(data, "domain")
    radius = _positive(_get(sec, "radius", "domain"), "domain.radius")
    path = _section(sec, "path", where="domain.path")
    times = _vec(_get(path, "times", "domain.path"), "domain.path.times")
    pts = _points(_get(path, "points", "domain.path"), "domain.path.points")
    if len(pts) != len(times):
        raise ScenarioError("domain.path: times and points differ in length")
    scale = _section(sec, "scale", required=False, where="domain.scale")
    st = sv = None
    if scale:
        st = _vec(_get(scale, "times", "domain.scale"), "domain.scale.times")
        sv = _vec(_get(scale, "values", "domain.scale"), "domain.scale.values", len(st))
    try:
        return MovingDomain(pts[0], radius, times, pts, st, sv)
    except ValueError as exc:
        raise ScenarioError(f"domain: {exc}") from exc


def _target(data) -> TargetField:
    sec = _section(data, "target")
    if "constant" in sec:
        return TargetField.constant(_vec(sec["constant"], "target.constant", 2))
    if "piecewise" in sec:
        pw = _section(sec, "piecewise", where="target.piecewise")
        switches = _vec(_get(pw, "switch_times", "target.piecewise"), "target.piecewise.switch_times")
        vectors = _points(_get(pw, "vectors", "target.piecewise"), "target.piecewise.vectors")
        try:
            return TargetField.piecewise_constant(switches, vectors)
        except ValueError as exc:
            raise ScenarioError(f"target.piecewise: {exc}") from exc
    raise ScenarioError("target: expected 'constant' or 'piecewise'")


def _pde(data, T) -> PdeSpec | None:
    sec = _section(data, "pde", required=False)
    if not sec:
        return None
    mesh = dict(_section(sec, "mesh", where="pde.mesh"))
    for k, v in list(mesh.items()):
        if k != "kind":
            mesh[k] = _vec(v, f"pde.mesh.{k}") if isinstance(v, (list, tuple)) else _num(v, f"pde.mesh.{k}")
    if "h" not in mesh:
        raise ScenarioError("pde.mesh.h: missing")
    pde_T = _positive(_get(sec, "T", "pde", T), "pde.T")
    if abs(pde_T - T) > 1e-12 * max(1.0, T):
        raise ScenarioError(f"pde.T: {pde_T} differs from discretization.T = {T}")
    bc = _get(sec, "bc", "pde", NEUMANN)
    scheme = _get(sec, "scheme", "pde", IMPLICIT)
    if bc not in (NEUMANN, DIRICHLET):
        raise ScenarioError(f"pde.bc: expected 'neumann' or 'dirichlet', got {bc!r}")
    if scheme not in (IMPLICIT, EXPLICIT):
        raise ScenarioError(f"pde.scheme: expected '{IMPLICIT}' or '{EXPLICIT}', got {scheme!r}")
    on_unstable = _get(sec, "on_unstable", "pde", "abort")
    if on_unstable not in ("abort", "warn"):
        raise ScenarioError(f"pde.on_unstable: expected 'abort' or 'warn', got {on_unstable!r}")
    settings = TransportSettings(
        eps=_positive(_get(sec, "eps", "pde"), "pde.eps"),
        dt=_positive(_get(sec, "dt", "pde"), "pde.dt"),
        T=pde_T,
        bc=bc,
        scheme=scheme,
        tol=_positive(_get(sec, "tol", "pde", 1e-10), "pde.tol"),
        max_iter=int(_positive(_get(sec, "max_iter", "pde", 2000), "pde.max_iter")),
        lumped=bool(_get(sec, "lumped_mass", "pde", True)),
        safety=_positive(_get(sec, "safety", "pde", 0.9), "pde.safety"),
        on_unstable=on_unstable,
    )
    init = _section(sec, "initial", where="pde.initial")
    snaps = [_num(v, f"pde.snapshots[{i}]") for i, v in enumerate(_get(sec, "snapshots", "pde", [0.0, pde_T]))]
    if any(s < 0 or s > pde_T + 1e-12 for s in snaps):
        raise ScenarioError("pde.snapshots: times must lie in [0, T]")
    interp = _get(sec, "interpolation", "pde", "midpoint")
    if interp not in ("midpoint", "nodal"):
        raise ScenarioError(f"pde.interpolation: expected 'midpoint' or 'nodal', got {interp!r}")
    return PdeSpec(
        mesh=mesh,
        settings=settings,
        center=_vec(_get(init, "center", "pde.initial"), "pde.initial.center", 2),
        sigma2=_positive(_get(init, "sigma2", "pde.initial"), "pde.initial.sigma2"),
        snapshots=snaps,
        interpolation=interp,
    )


def parse_scenario(data: dict, name: str = "scenario") -> Scenario:
    """Validate a scenario mapping; raises :class:`ScenarioError` before any computation."""
    if not isinstance(data, dict):
        raise ScenarioError("scenario: top level must be a mapping")
    config = _dipoles(data)
    domain = _domain(data)
    target = _target(data)

    obj = _section(data, "objective")
    weights = {}
    for key, attr in (("lambda", "lam"), ("eta", "eta"), ("beta", "beta")):
        v = _num(_get(obj, key, "objective", 1e-5), f"objective.{key}")
        if v < 0:
            raise ScenarioError(f"objective.{key}: must be nonnegative, got {v}")
        weights[attr] = v
    weights = ObjectiveConfig(mode=config.mode, **weights)

    disc = _section(data, "discretization")
    N = _get(disc, "N", "discretization")
    if not isinstance(N, int) or isinstance(N, bool) or N < 1:
        raise ScenarioError(f"discretization.N: expected a positive integer, got {N!r}")
    T = _positive(_get(disc, "T", "discretization"), "discretization.T")
    if abs(domain.final_time - T) > 1e-12 * max(1.0, T):
        raise ScenarioError(f"domain.path: last time {domain.final_time} differs from discretization.T = {T}")
    refinement = _get(disc, "quadrature_refinement", "discretization", 4)
    if not isinstance(refinement, int) or refinement < 1:
        raise ScenarioError(f"discretization.quadrature_refinement: expected an integer >= 1, got {refinement!r}")

    opt = _section(data, "optimizer", required=False)
    memory = opt.get("memory")
    if memory is not None and (not isinstance(memory, int) or memory < 1):
        raise ScenarioError(f"optimizer.memory: expected a positive integer or null, got {memory!r}")
    max_iters = opt.get("max_iters", 1000)
    if not isinstance(max_iters, int) or max_iters < 0:
        raise ScenarioError(f"optimizer.max_iters: expected a nonnegative integer, got {max_iters!r}")
    try:
        settings = OptimizerSettings(
            grad_tol=_positive(opt.get("grad_tol", 1e-6), "optimizer.grad_tol"), max_iters=max_iters, memory=memory
        )
    except ValueError as exc:
        raise ScenarioError(f"optimizer: {exc}") from exc
    kappa = opt.get("kappa")
    kappa = None if kappa is None else _positive(kappa, "optimizer.kappa")
    if kappa is not None:
        stride = kappa / (T / N)
        if abs(stride - round(stride)) > 1e-9 or N % int(round(stride)):
            raise ScenarioError("optimizer.kappa: must be an integer multiple of T/N dividing N")

    grid = dict(_section(data, "force_grid", required=False))
    grid.setdefault("n", 21)
    grid.setdefault("box", [-1.0, 1.0, -1.0, 1.0])
    grid["box"] = _vec(grid["box"], "force_grid.box", 4)
    if not isinstance(grid["n"], int) or grid["n"] < 2:
        raise ScenarioError("force_grid.n: expected an integer >= 2")

    pde = _pde(data, T)
    if pde is not None:
        try:
            # a one-cell build checks the geometry without the cost of the real mesh
            generate_mesh(dict(pde.mesh, h=1e3))
        except KeyError as exc:
            raise ScenarioError(f"pde.mesh.{exc.args[0]}: missing") from exc
        except MeshError as exc:
            raise ScenarioError(f"pde.mesh: {exc}") from exc
    output = data.get("output")
    return Scenario(
        name=str(data.get("name", name)),
        config=config,
        domain=domain,
        target=target,
        weights=weights,
        N=N,
        T=T,
        refinement=refinement,
        optimizer=settings,
        init_tol=_positive(opt.get("init_tol", 1e-3), "optimizer.init_tol"),
        kappa=kappa,
        force_grid=grid,
        pde=pde,
        output=output,
        raw=copy.deepcopy(data),
    )


def bundled_scenarios() -> list[str]:
    root = resources.files("magsteer") / "scenarios"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_raw(source) -> dict:
    """Read a scenario file, or a bundled scenario by name."""
    path = Path(source)
    if path.exists():
        text = path.read_text()
    else:
        bundled = resources.files("magsteer") / "scenarios" / f"{source}.yaml"
        if not bundled.is_file():
            raise ScenarioError(f"{source}: no such file or bundled scenario ({', '.join(bundled_scenarios())})")
        text = bundled.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioError(f"{source}:{where} {getattr(exc, 'problem', exc)}") from exc
    return data


def load_scenario(source, overrides: dict[str, Any] | None = None) -> Scenario:
    """Load and validate; ``overrides`` maps dotted keys (``"discretization.N"``) to values."""
    data = load_raw(source)
    if not isinstance(data, dict):
        raise ScenarioError(f"{source}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return parse_scenario(data, name=Path(str(source)).stem)
