"""Batch front end: problem files in, reports and plot-ready data out.

Problem files are JSON.  Dynamics come either from a builtin
(double_integrator, scalar_integrator, linear_system) or from expression
strings over x0..x{m-1}, u0..u{k-1} in a small arithmetic grammar:
+, -, *, /, ^ and the functions sin, cos, exp.  Exit codes: 0 success or
check passed, 1 check failed, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import ast
import json
import math
import os
import re
import sys

import numpy as np

from .control_system import (ControlSignal, ControlSystem, ExtendedTrajectory,
                             Trajectory, ball, box, extend, finite, simulate)
from .cone_geometry import conic_membership, membership_margin
from .flows import FlowBlowUpError, IntegratorConfig, SingularTransportError
from .perturbations import build_tangent_cone
from .pmp import (AdjointCurve, BoundarySpec, Extremal, PMPCheckOptions,
                  UnboundedHamiltonianError, adjoint_flow, check_pmp)
from .reachable import SamplePolicy, sample_reachable
from .shooting import (ShootingFailure, ShootingOptions, ShootingProblem,
                       shoot, switching_structure)


class ProblemError(ValueError):
    """Bad input: malformed file, unknown token, dimension mismatch."""


# ---------------------------------------------------------------------------
# expression grammar

_FUNCS = {"sin": math.sin, "cos": math.cos, "exp": math.exp}
_BINOPS = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b,
           ast.Mult: lambda a, b: a * b, ast.Div: lambda a, b: a / b,
           ast.Pow: lambda a, b: a ** b}
_NAME_RE = re.compile(r"^([xu])(\d+)$")


def _describe(node) -> str:
    try:
        return ast.unparse(node)
    except Exception:
        return type(node).__name__


def _compile_node(node, m: int, k: int):
    if isinstance(node, ast.Expression):
        return _compile_node(node.body, m, k)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            v = float(node.value)
            return lambda x, u: v
        raise ProblemError(f"parse error: disallowed constant '{node.value!r}'")
    if isinstance(node, ast.Name):
        mm = _NAME_RE.match(node.id)
        if not mm:
            raise ProblemError(f"parse error: unknown identifier '{node.id}'")
        kind, idx = mm.group(1), int(mm.group(2))
        bound = m if kind == "x" else k
        if idx >= bound:
            raise ProblemError(
                f"parse error: identifier '{node.id}' out of range (dim {bound})")
        if kind == "x":
            return lambda x, u: float(x[idx])
        return lambda x, u: float(u[idx])
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        fa = _compile_node(node.left, m, k)
        fb = _compile_node(node.right, m, k)
        op = _BINOPS[type(node.op)]
        return lambda x, u: op(fa(x, u), fb(x, u))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
        fa = _compile_node(node.operand, m, k)
        if isinstance(node.op, ast.USub):
            return lambda x, u: -fa(x, u)
        return fa
    if isinstance(node, ast.Call):
        if (not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS
                or node.keywords or len(node.args) != 1):
            raise ProblemError(f"parse error: disallowed call '{_describe(node)}'")
        fn = _FUNCS[node.func.id]
        fa = _compile_node(node.args[0], m, k)
        return lambda x, u: fn(fa(x, u))
    raise ProblemError(f"parse error: disallowed token '{_describe(node)}'")


def parse_expression(src: str, m: int, k: int):
    """Compile one grammar expression to a callable (x, u) -> float."""
    if not isinstance(src, str):
        raise ProblemError(f"parse error: expression must be a string, got {src!r}")
    text = src.replace("^", "**")
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as e:
        off = (e.offset or 1) - 1
        token = text[off:off + 8].split()[0] if text[off:off + 8].split() else text[off:off + 8]
        raise ProblemError(
            f"parse error in '{src}' at offset {off}: bad token '{token or e.msg}'")
    fn = _compile_node(tree, m, k)

    def guarded(x, u):
        # overflow surfaces as a non-finite value so the integrator's
        # blow-up detection owns the diagnostic
        try:
            return fn(x, u)
        except (OverflowError, ZeroDivisionError):
            return math.nan

    return guarded


# ---------------------------------------------------------------------------
# problem files

def _as_matrix(obj, name):
    try:
        M = np.asarray(obj, dtype=float)
    except (TypeError, ValueError):
        raise ProblemError(f"{name} must be a numeric matrix")
    if M.ndim != 2:
        raise ProblemError(f"{name} must be two-dimensional")
    return M


def _parse_control_set(spec):
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ProblemError("control_set must be an object with a 'kind'")
    kind = spec["kind"]
    if kind == "box":
        return box(spec["lo"], spec["hi"])
    if kind == "finite":
        return finite([tuple(np.atleast_1d(p)) for p in spec["points"]])
    if kind == "ball":
        return ball(spec["center"], float(spec["radius"]))
    raise ProblemError(f"unknown control_set kind '{kind}'")


def _emit_control_set(cset):
    if cset.kind == "box":
        return {"kind": "box", "lo": list(cset.lo), "hi": list(cset.hi)}
    if cset.kind == "finite":
        return {"kind": "finite", "points": [list(np.atleast_1d(p)) for p in cset.points]}
    return {"kind": "ball", "center": list(cset.center), "radius": float(cset.radius)}


def _build_dynamics(spec, cset):
    """Returns (m, k, f, df_dx, normalized spec)."""
    if not isinstance(spec, dict):
        raise ProblemError("dynamics must be an object")
    if "builtin" in spec:
        name = spec["builtin"]
        if name == "double_integrator":
            return (2, 1, lambda x, u: np.array([x[1], u[0]]),
                    lambda x, u: np.array([[0.0, 1.0], [0.0, 0.0]]),
                    {"builtin": name})
        if name == "scalar_integrator":
            return (1, 1, lambda x, u: np.atleast_1d(u[0]),
                    lambda x, u: np.zeros((1, 1)), {"builtin": name})
        if name == "linear_system":
            A = _as_matrix(spec.get("A"), "A")
            B = _as_matrix(spec.get("B"), "B")
            if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
                raise ProblemError("linear_system needs square A and matching B")
            return (A.shape[0], B.shape[1],
                    lambda x, u: A @ x + B @ np.atleast_1d(u),
                    lambda x, u: A,
                    {"builtin": name, "A": A.tolist(), "B": B.tolist()})
        raise ProblemError(f"unknown builtin '{name}'")
    if "expressions" in spec:
        exprs = spec["expressions"]
        if not isinstance(exprs, list) or not exprs:
            raise ProblemError("dynamics.expressions must be a nonempty list")
        m, k = len(exprs), cset.dim
        fns = [parse_expression(e, m, k) for e in exprs]
        return (m, k,
                lambda x, u: np.array([fn(x, u) for fn in fns]),
                None, {"expressions": list(exprs)})
    raise ProblemError("dynamics needs 'builtin' or 'expressions'")


def _parse_boundary_end(spec, m, name):
    """Returns (anchor, basis or None, normalized spec)."""
    if not isinstance(spec, dict):
        raise ProblemError(f"boundary.{name} must be an object")
    if "point" in spec:
        x = np.asarray(spec["point"], dtype=float).ravel()
        if x.size != m:
            raise ProblemError(f"boundary.{name}.point has wrong dimension")
        return x, None, {"point": x.tolist()}
    if "anchor" in spec:
        x = np.asarray(spec["anchor"], dtype=float).ravel()
        if x.size != m:
            raise ProblemError(f"boundary.{name}.anchor has wrong dimension")
        normals = [np.asarray(w, dtype=float).ravel() for w in spec.get("normals", [])]
        if any(w.size != m for w in normals):
            raise ProblemError(f"boundary.{name} normal has wrong dimension")
        if normals:
            N = np.vstack(normals)
            # manifold tangent space = annihilator of the level-set normals
            _, s, vt = np.linalg.svd(N)
            rank = int(np.sum(s > 1e-12 * (s[0] if len(s) else 1.0)))
            basis = tuple(vt[rank:])
        else:
            basis = tuple(np.eye(m))
        return x, basis, {"anchor": x.tolist(),
                          "normals": [w.tolist() for w in normals]}
    raise ProblemError(f"boundary.{name} needs 'point' or 'anchor'")


def _parse_signal(spec, a, b, k):
    if not isinstance(spec, dict) or "values" not in spec:
        raise ProblemError("control must be an object with 'values'")
    times = tuple(float(t) for t in spec.get("switch_times", []))
    values = tuple(tuple(np.atleast_1d(np.asarray(v, dtype=float))) for v in spec["values"])
    if any(len(v) != k for v in values):
        raise ProblemError("control value has wrong dimension")
    try:
        return ControlSignal(a, b, times, values)
    except ValueError as e:
        raise ProblemError(f"bad control signal: {e}")


def _emit_signal(sig):
    return {"switch_times": list(sig.switch_times),
            "values": [list(v) for v in sig.values]}


class Problem:
    """Parsed problem file; `to_dict` re-emits the normalized form."""

    def __init__(self, data):
        if not isinstance(data, dict):
            raise ProblemError("problem file must hold a JSON object")
        self.name = str(data.get("name", "problem"))
        try:
            self.control_set = _parse_control_set(data["control_set"])
        except KeyError:
            raise ProblemError("problem file needs 'control_set'")
        try:
            dyn = data["dynamics"]
        except KeyError:
            raise ProblemError("problem file needs 'dynamics'")
        m, k, f, df, self.dyn_spec = _build_dynamics(dyn, self.control_set)
        if k != self.control_set.dim:
            raise ProblemError("control_set dimension does not match the dynamics")
        self.cost_spec = None
        F = None
        cost = data.get("cost")
        if cost is not None:
            if not isinstance(cost, dict) or "expression" not in cost:
                raise ProblemError("cost must be an object with 'expression'")
            F = parse_expression(cost["expression"], m, k)
            self.cost_spec = {"expression": cost["expression"]}
        self.sys = ControlSystem(m=m, k=k, f=f, control_set=self.control_set,
                                 F=F, df_dx=df)
        hz = data.get("horizon", {"a": 0.0, "b": 1.0})
        if isinstance(hz, (int, float)):
            hz = {"a": 0.0, "b": float(hz)}
        self.a, self.b = float(hz.get("a", 0.0)), float(hz["b"])
        if not self.b > self.a:
            raise ProblemError("horizon needs b > a")
        bd = data.get("boundary")
        if bd is None:
            bd = {"mode": "fixed_time",
                  "initial": {"point": [0.0] * m},
                  "final": {"anchor": [0.0] * m, "normals": []}}
        mode = bd.get("mode", "fixed_time")
        if mode not in ("fixed_time", "free_time"):
            raise ProblemError(f"unknown boundary mode '{mode}'")
        self.x_a, ib, ispec = _parse_boundary_end(bd["initial"], m, "initial")
        self.x_b, fb, fspec = _parse_boundary_end(bd["final"], m, "final")
        self.boundary = BoundarySpec(mode=mode, initial=ib, final=fb)
        self.bd_spec = {"mode": mode, "initial": ispec, "final": fspec}
        self.p0 = float(data.get("p0", -1.0))
        self.tol = float(data.get("tol", 1e-6))
        integ = data.get("integrator", {})
        self.step = float(integ["step"]) if "step" in integ else None
        self.control = None
        if data.get("control") is not None:
            self.control = _parse_signal(data["control"], self.a, self.b, k)
        self.cones = data.get("cones")
        self.reach = data.get("reach")
        self.guess = data.get("guess")
        self.shooting = data.get("shooting")
        if self.shooting is not None:
            allowed = {"max_iter", "n_starts", "scales", "fd_h", "max_switches"}
            bad = set(self.shooting) - allowed
            if bad:
                raise ProblemError(f"unknown shooting option(s): {sorted(bad)}")

    def to_dict(self):
        d = {"name": self.name,
             "dynamics": self.dyn_spec,
             "control_set": _emit_control_set(self.control_set),
             "cost": self.cost_spec,
             "horizon": {"a": self.a, "b": self.b},
             "boundary": self.bd_spec,
             "p0": self.p0,
             "tol": self.tol}
        if self.step is not None:
            d["integrator"] = {"step": self.step}
        if self.control is not None:
            d["control"] = _emit_signal(self.control)
        if self.cones is not None:
            d["cones"] = self.cones
        if self.reach is not None:
            d["reach"] = self.reach
        if self.guess is not None:
            d["guess"] = self.guess
        if self.shooting is not None:
            d["shooting"] = self.shooting
        return d


def load_problem(path) -> Problem:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ProblemError(f"problem file not found: {path}")
    except json.JSONDecodeError as e:
        raise ProblemError(f"invalid JSON in {path}: line {e.lineno}: {e.msg}")
    return Problem(data)


# ---------------------------------------------------------------------------
# output helpers

def _g17(v) -> float:
    # round-trips exactly; JSON then prints the shortest exact form
    return float("%.17g" % float(v))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _adjoint_to_csv(adj: AdjointCurve, path):
    m = adj.sigma.shape[1]
    header = "t,sigma0," + ",".join(f"sigma{j + 1}" for j in range(m))
    lines = [header]
    for t, row in zip(adj.grid, adj.sigma):
        vals = np.concatenate(([t, adj.sigma0], row))
        lines.append(",".join("%.17g" % v for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_csv(path, expect_prefix):
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except FileNotFoundError:
        raise ProblemError(f"missing file: {path}")
    if not lines or not lines[0].startswith(expect_prefix):
        raise ProblemError(f"{path}: expected header starting with '{expect_prefix}'")
    try:
        data = np.array([[float(c) for c in ln.split(",")] for ln in lines[1:]])
    except ValueError:
        raise ProblemError(f"{path}: non-numeric row")
    if data.ndim != 2 or data.shape[0] < 2:
        raise ProblemError(f"{path}: need at least two data rows")
    return data


def _cfg(problem: Problem) -> IntegratorConfig:
    if problem.step is not None:
        return IntegratorConfig(step=problem.step)
    return IntegratorConfig()


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    problem = load_problem(args.problem)
    if problem.control is None:
        raise ProblemError("simulate needs a 'control' entry in the problem file")
    os.makedirs(args.out, exist_ok=True)
    if problem.sys.F is not None:
        traj = simulate(extend(problem.sys), problem.control,
                        np.concatenate(([0.0], problem.x_a)), _cfg(problem))
        cost = float(traj.endpoint[0])
    else:
        traj = simulate(problem.sys, problem.control, problem.x_a, _cfg(problem))
        cost = 0.0
    traj.to_csv(os.path.join(args.out, "trajectory.csv"))
    _write_json(os.path.join(args.out, "cost.json"),
                {"name": problem.name, "cost": _g17(cost)})
    _write_json(os.path.join(args.out, "control.json"), _emit_signal(problem.control))
    return 0


def _load_extremal(problem: Problem, out_dir):
    """Rebuild an Extremal from the three files shoot (or simulate) wrote."""
    esys = extend(problem.sys)
    m = problem.sys.m
    tdata = _load_csv(os.path.join(out_dir, "trajectory.csv"), "t,")
    header_cols = tdata.shape[1] - 1
    with open(os.path.join(out_dir, "control.json")) as fh:
        sig_spec = json.load(fh)
    grid = tdata[:, 0]
    sig = _parse_signal(sig_spec, float(grid[0]), float(grid[-1]), problem.sys.k)
    if header_cols == m + 1:
        states = np.column_stack([tdata[:, -1], tdata[:, 1:m + 1]])
    elif header_cols == m:
        states = np.column_stack([np.zeros(len(grid)), tdata[:, 1:m + 1]])
    else:
        raise ProblemError("trajectory.csv column count does not match the problem")
    vel = np.array([esys.dynamics(states[i], sig.value_at(min(grid[i], sig.b - 1e-15)))
                    for i in range(len(grid))])
    traj = ExtendedTrajectory(grid=grid, states=states, control=sig,
                              velocities=vel, system=esys)
    adata = _load_csv(os.path.join(out_dir, "adjoint.csv"), "t,sigma0")
    if adata.shape[1] != m + 2:
        raise ProblemError("adjoint.csv column count does not match the problem")
    if len(adata) != len(grid) or np.max(np.abs(adata[:, 0] - grid)) > 1e-12:
        raise ProblemError("adjoint.csv grid does not match trajectory.csv")
    adj = AdjointCurve(grid=grid, sigma0=float(adata[0, 1]), sigma=adata[:, 2:])
    return Extremal(ext_traj=traj, control=sig, adjoint=adj)


def cmd_check(args) -> int:
    problem = load_problem(args.problem)
    ext = _load_extremal(problem, args.out)
    bounds = problem.boundary
    if args.mode is not None:
        mode = "free_time" if args.mode == "free" else "fixed_time"
        bounds = BoundarySpec(mode=mode, initial=bounds.initial or None,
                              final=bounds.final or None)
    tol = args.tol if args.tol is not None else problem.tol
    report = check_pmp(problem.sys, ext, bounds, PMPCheckOptions(tol=tol))
    _write_json(os.path.join(args.out, "report.json"),
                json.loads(report.to_json()))
    return 0 if report.classification in ("normal", "abnormal") else 1


def cmd_shoot(args) -> int:
    problem = load_problem(args.problem)
    os.makedirs(args.out, exist_ok=True)
    sp = ShootingProblem(sys=problem.sys, bounds=problem.boundary,
                         p0=problem.p0, x_a=problem.x_a, x_b=problem.x_b,
                         a=problem.a, b=problem.b)
    extra = dict(problem.shooting or {})
    if "scales" in extra:
        extra["scales"] = tuple(float(s) for s in extra["scales"])
    opts = ShootingOptions(tol=args.tol if args.tol is not None else problem.tol,
                           step=problem.step,
                           seed=args.seed if args.seed is not None else 0,
                           **extra)
    guess = None if problem.guess is None else np.asarray(problem.guess, dtype=float)
    result = shoot(sp, guess=guess, opts=opts)
    struct = switching_structure(result.extremal)
    payload = {
        "name": problem.name,
        "converged": bool(result.converged),
        "residual_norm": _g17(result.residual_norm),
        "iterations": int(result.iterations),
        "jacobian_rank": int(result.jacobian_rank),
        "n_unknowns": int(result.n_unknowns),
        "final_time": _g17(result.extremal.ext_traj.b),
        "cost": _g17(result.extremal.ext_traj.endpoint[0]),
        "switch_times": [_g17(t) for t in struct.switch_times],
        "arc_labels": list(struct.arc_labels),
    }
    _write_json(os.path.join(args.out, "result.json"), payload)
    result.extremal.ext_traj.to_csv(os.path.join(args.out, "trajectory.csv"))
    _adjoint_to_csv(result.extremal.adjoint, os.path.join(args.out, "adjoint.csv"))
    _write_json(os.path.join(args.out, "control.json"),
                _emit_signal(result.extremal.control))
    return 0 if result.converged else 3


def cmd_cones(args) -> int:
    problem = load_problem(args.problem)
    if problem.control is None:
        raise ProblemError("cones needs a 'control' entry in the problem file")
    spec = problem.cones
    if not isinstance(spec, dict) or "time" not in spec:
        raise ProblemError("cones needs a 'cones' object with 'time'")
    os.makedirs(args.out, exist_ok=True)
    cfg = _cfg(problem)
    traj = simulate(problem.sys, problem.control, problem.x_a, cfg)
    sampling = {"times": [float(t) for t in spec.get("times", [])],
                "controls": [tuple(np.atleast_1d(np.asarray(c, dtype=float)))
                             for c in spec.get("controls", [])]}
    try:
        cone = build_tangent_cone(problem.sys, traj, float(spec["time"]), sampling, cfg)
    except ValueError as e:
        raise ProblemError(f"cone sampling: {e}")
    cone.to_csv(os.path.join(args.out, "cone.csv"))
    gens = np.array(cone.cone.generators) if cone.cone.generators else np.empty((0, problem.sys.m))
    lines = [",".join(f"g{j}" for j in range(problem.sys.m))]
    for row in gens:
        lines.append(",".join("%.17g" % v for v in row))
    with open(os.path.join(args.out, "generators.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    queries = []
    for q in spec.get("queries", []):
        v = np.asarray(q, dtype=float).ravel()
        if v.size != problem.sys.m:
            raise ProblemError("membership query has wrong dimension")
        queries.append({"vector": [_g17(c) for c in v],
                        "status": conic_membership(cone.cone, v),
                        "margin": _g17(membership_margin(cone.cone, v))})
    _write_json(os.path.join(args.out, "membership.json"), {"queries": queries})
    return 0


def cmd_reach(args) -> int:
    problem = load_problem(args.problem)
    spec = problem.reach or {}
    os.makedirs(args.out, exist_ok=True)
    policy = SamplePolicy(
        n_controls=int(spec.get("n_controls", 64)),
        max_switches=int(spec.get("max_switches", 3)),
        seed=args.seed if args.seed is not None else int(spec.get("seed", 0)),
        step=problem.step)
    T = float(spec.get("T", problem.b - problem.a))
    cloud = sample_reachable(problem.sys, problem.x_a, T, policy)
    cloud.to_csv(os.path.join(args.out, "cloud.csv"))
    cloud.save_provenance(os.path.join(args.out, "cloud_provenance.json"))
    return 0


# ---------------------------------------------------------------------------

def _build_parser():
    p = argparse.ArgumentParser(
        prog="pmpkit",
        description="simulate, check, shoot, cones, reach on problem files")
    sub = p.add_subparsers(dest="command")
    for name, fn in (("simulate", cmd_simulate), ("check", cmd_check),
                     ("shoot", cmd_shoot), ("cones", cmd_cones),
                     ("reach", cmd_reach)):
        sp = sub.add_parser(name)
        sp.add_argument("--problem", required=True)
        sp.add_argument("--out", default=".")
        sp.add_argument("--tol", type=float, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--mode", choices=("fixed", "free"), default=None)
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ProblemError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ShootingFailure, FlowBlowUpError, SingularTransportError,
            UnboundedHamiltonianError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
