"""Indirect shooting: root-find boundary residuals of the Hamiltonian system.

The maximum principle supplies necessary conditions, not an algorithm; the
standard indirect realization integrates the coupled (x, p) system forward
with the control chosen by pointwise Hamiltonian maximization and roots the
endpoint defect over the unknown initial covector (plus the final time in
free-time mode, plus initial-manifold coordinates).  The control is held
constant within a step, refreshed at the step midpoint; discontinuities of
the maximizer are located by bisection and become exact switch times of the
returned piecewise-constant control.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .cone_geometry import unit_directions
from .control_system import ControlSignal, ControlSystem, extend, simulate
from .flows import IntegratorConfig
from .pmp import (
    AdjointCurve,
    BoundarySpec,
    Extremal,
    MaximizeOptions,
    adjoint_flow,
    maximize_hamiltonian,
)


@dataclass
class ShootingProblem:
    """Two-point boundary-value problem for extremal candidates.

    Unknowns: initial covector p(a) in R^m, plus the final time b in
    free-time mode, plus the coordinates of the initial point along the
    initial tangent basis in manifold mode (x(a) = x_a + sum c_i w_i).
    `b` is the horizon in fixed-time mode and the starting guess for it in
    free-time mode; `x_b` anchors the final point or manifold.
    """

    sys: ControlSystem
    bounds: BoundarySpec
    p0: float
    x_a: np.ndarray
    x_b: np.ndarray
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.p0 not in (-1.0, 0.0):
            raise ValueError("p0 must be -1 or 0")
        self.x_a = np.asarray(self.x_a, dtype=float).ravel()
        self.x_b = np.asarray(self.x_b, dtype=float).ravel()
        if self.x_a.size != self.sys.m or self.x_b.size != self.sys.m:
            raise ValueError("anchor dimension mismatch")
        if not self.b > self.a:
            raise ValueError("need b > a")

    @property
    def n_unknowns(self) -> int:
        d_a = len(self.bounds.initial or ())
        return self.sys.m + d_a + (1 if self.bounds.mode == "free_time" else 0)


@dataclass
class ShootingResult:
    extremal: Extremal
    residual_norm: float
    iterations: int
    converged: bool
    jacobian_rank: int
    n_unknowns: int


@dataclass
class ShootingOptions:
    tol: float = 1e-6
    max_iter: int = 40
    step: Optional[float] = None
    n_starts: int = 8
    scales: Tuple[float, ...] = (0.1, 1.0, 10.0)
    seed: int = 0
    fd_h: float = 1e-6
    switch_jump: Optional[float] = None
    switch_time_tol: float = 1e-10
    max_switches: int = 200
    maximize: Optional[MaximizeOptions] = None


@dataclass
class SwitchingStructure:
    switch_times: Tuple[float, ...]
    arc_labels: Tuple[str, ...]


class ShootingFailure(RuntimeError):
    """Every trial blew up or produced no finite residual."""


def _auto_jump_tol(control_set) -> float:
    if control_set.kind == "finite":
        pts = [np.asarray(p, float) for p in control_set.points]
        if len(pts) < 2:
            return 1e-9
        dmin = min(np.linalg.norm(p - q)
                   for i, p in enumerate(pts) for q in pts[i + 1:])
        return 0.5 * dmin
    if control_set.kind == "box":
        span = control_set.hi - control_set.lo
        finite = span[np.isfinite(span)]
        diam = float(np.max(finite)) if finite.size else 1.0
        return 0.05 * max(1.0, diam)
    return 0.05 * max(1.0, 2.0 * control_set.radius)


def _rk4_coupled(sys, p0, x, p, u, h):
    def fx(x_):
        return sys.dynamics(x_, u)

    def fp(x_, p_):
        return -p0 * sys.cost_grad_x(x_, u) - sys.jac_x(x_, u).T @ p_

    k1x, k1p = fx(x), fp(x, p)
    x2, p2 = x + 0.5 * h * k1x, p + 0.5 * h * k1p
    k2x, k2p = fx(x2), fp(x2, p2)
    x3, p3 = x + 0.5 * h * k2x, p + 0.5 * h * k2p
    k3x, k3p = fx(x3), fp(x3, p3)
    x4, p4 = x + h * k3x, p + h * k3p
    k4x, k4p = fx(x4), fp(x4, p4)
    xn = x + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    pn = p + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    return xn, pn


class _Propagation:
    def __init__(self, x_b, p_b, steps, sup_h):
        self.x_b = x_b
        self.p_b = p_b
        self.steps = steps      # list of (t_start, u_value)
        self.sup_h = sup_h      # max_u H at the endpoint


def _propagate(problem: ShootingProblem, z, opts: ShootingOptions,
               step: float) -> Optional[_Propagation]:
    sys = problem.sys
    m = sys.m
    d_a = len(problem.bounds.initial or ())
    free = problem.bounds.mode == "free_time"
    p = np.array(z[:m], dtype=float)
    x = problem.x_a.copy()
    for ci, w in zip(z[m:m + d_a], problem.bounds.initial or ()):
        x = x + ci * np.asarray(w, float)
    b = float(z[m + d_a]) if free else problem.b
    if not b > problem.a + 1e-9 * (1.0 + abs(problem.a)):
        return None
    jump_tol = opts.switch_jump or _auto_jump_tol(sys.control_set)

    def argmax(xc, pc):
        return maximize_hamiltonian(sys, problem.p0, pc, xc, opts.maximize)

    def jumped(u1, u2):
        return float(np.max(np.abs(u1 - u2))) > jump_tol

    t = problem.a
    try:
        u_cur = argmax(x, p).u_star
    except Exception:
        return None
    steps: List[Tuple[float, np.ndarray]] = []
    n_sw = 0
    while b - t > 1e-13 * (1.0 + abs(b)):
        h = min(step, b - t)

        def commit(dt, uval):
            nonlocal t, x, p
            xn, pn = _rk4_coupled(sys, problem.p0, x, p, uval, dt)
            if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(pn))):
                raise FloatingPointError
            steps.append((t, np.asarray(uval, float)))
            t, x, p = t + dt, xn, pn

        def bisect(u_frozen, hi0):
            # largest substep keeping the maximizer on the current arc
            lo, hi = 0.0, hi0
            while hi - lo > opts.switch_time_tol:
                mid = 0.5 * (lo + hi)
                xm, pm = _rk4_coupled(sys, problem.p0, x, p, u_frozen, mid)
                if not (np.all(np.isfinite(xm)) and np.all(np.isfinite(pm))):
                    raise FloatingPointError
                if jumped(argmax(xm, pm).u_star, u_frozen):
                    hi = mid
                else:
                    lo = mid
            return hi

        try:
            with np.errstate(over="ignore", invalid="ignore"):
                xh, ph = _rk4_coupled(sys, problem.p0, x, p, u_cur, 0.5 * h)
                if not (np.all(np.isfinite(xh)) and np.all(np.isfinite(ph))):
                    return None
                u_mid = argmax(xh, ph).u_star
                if jumped(u_mid, u_cur):
                    commit(bisect(u_cur, 0.5 * h), u_cur)
                    u_cur = argmax(x, p).u_star
                    n_sw += 1
                else:
                    x1, p1 = _rk4_coupled(sys, problem.p0, x, p, u_mid, h)
                    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(p1))):
                        return None
                    u_end = argmax(x1, p1).u_star
                    if jumped(u_end, u_mid):
                        commit(bisect(u_mid, h), u_mid)
                        u_cur = argmax(x, p).u_star
                        n_sw += 1
                    else:
                        commit(h, u_mid)
                        u_cur = u_end
        except FloatingPointError:
            return None
        except Exception:
            return None
        if n_sw > opts.max_switches:
            return None
    try:
        sup_h = argmax(x, p).value
    except Exception:
        return None
    return _Propagation(x, p, steps, sup_h)


def _final_complement(bounds: BoundarySpec, m: int) -> np.ndarray:
    rows = [np.asarray(w, float) for w in (bounds.final or ())]
    if not rows:
        return np.eye(m)
    A = np.vstack(rows)
    _, s, Vt = np.linalg.svd(A)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0])))
    return Vt[rank:].T


def boundary_residual(problem: ShootingProblem, z,
                      opts: Optional[ShootingOptions] = None) -> Optional[np.ndarray]:
    """Residual vector of the shooting system at the unknown vector z.

    Layout: final-point mismatch (or manifold normal defect followed by
    final transversality), then initial transversality, then sup_u H(b) in
    free-time mode.  None signals a blown-up or invalid trial.
    """
    opts = opts or ShootingOptions()
    step = opts.step or 1e-3 * (problem.b - problem.a)
    prop = _propagate(problem, z, opts, step)
    if prop is None:
        return None
    m = problem.sys.m
    d_a = len(problem.bounds.initial or ())
    parts = []
    if problem.bounds.final is None:
        parts.append(prop.x_b - problem.x_b)
    else:
        comp = _final_complement(problem.bounds, m)
        parts.append(comp.T @ (prop.x_b - problem.x_b))
        parts.append(np.array([float(prop.p_b @ np.asarray(w, float))
                               for w in problem.bounds.final]))
    if d_a:
        p_a = np.array(z[:m], dtype=float)
        parts.append(np.array([float(p_a @ np.asarray(w, float))
                               for w in problem.bounds.initial]))
    if problem.bounds.mode == "free_time":
        parts.append(np.array([prop.sup_h]))
    return np.concatenate([np.atleast_1d(p) for p in parts])


def _fd_jacobian(problem, z, R0, opts, h):
    n = len(z)
    J = np.zeros((len(R0), n))
    for j in range(n):
        zp = z.copy()
        zp[j] += h * (1.0 + abs(z[j]))
        Rp = boundary_residual(problem, zp, opts)
        if Rp is None:
            continue
        J[:, j] = (Rp - R0) / (h * (1.0 + abs(z[j])))
    return J


def _newton(problem, z0, opts):
    z = np.asarray(z0, dtype=float).copy()
    R = boundary_residual(problem, z, opts)
    if R is None:
        return z, np.inf, 0, False
    rn = float(np.linalg.norm(R))
    for it in range(1, opts.max_iter + 1):
        if rn <= opts.tol:
            return z, rn, it - 1, True
        J = _fd_jacobian(problem, z, R, opts, opts.fd_h)
        try:
            s = np.linalg.lstsq(J, -R, rcond=None)[0]
        except np.linalg.LinAlgError:
            return z, rn, it, False
        if not np.all(np.isfinite(s)):
            return z, rn, it, False
        alpha, accepted = 1.0, False
        while alpha >= 1.0 / 64.0:
            z_try = z + alpha * s
            R_try = boundary_residual(problem, z_try, opts)
            if R_try is not None:
                rn_try = float(np.linalg.norm(R_try))
                if rn_try < (1.0 - 0.25 * alpha) * rn or rn_try <= opts.tol:
                    z, R, rn, accepted = z_try, R_try, rn_try, True
                    break
            alpha *= 0.5
        if not accepted:
            return z, rn, it, False
    return z, rn, opts.max_iter, rn <= opts.tol


def _build_extremal(problem, z, opts, step):
    prop = _propagate(problem, z, opts, step)
    if prop is None:
        raise ShootingFailure("selected iterate no longer integrates")
    m = problem.sys.m
    d_a = len(problem.bounds.initial or ())
    free = problem.bounds.mode == "free_time"
    b = float(z[m + d_a]) if free else problem.b
    x0 = problem.x_a.copy()
    for ci, w in zip(z[m:m + d_a], problem.bounds.initial or ()):
        x0 = x0 + ci * np.asarray(w, float)

    switches: List[float] = []
    values: List[Tuple[float, ...]] = [tuple(prop.steps[0][1])]
    for (t_s, u_s) in prop.steps[1:]:
        if not np.array_equal(np.asarray(u_s), np.asarray(values[-1])):
            switches.append(t_s)
            values.append(tuple(u_s))
    sig = ControlSignal(problem.a, b, tuple(switches), tuple(values))
    cfg = IntegratorConfig(step=step)
    ext_traj = simulate(extend(problem.sys), sig,
                        np.concatenate(([0.0], x0)), cfg)
    base = simulate(problem.sys, sig, x0, cfg)
    adj = adjoint_flow(problem.sys, base, problem.p0, prop.p_b)
    return Extremal(ext_traj, sig, adj)


def shoot(problem: ShootingProblem, guess=None,
          opts: Optional[ShootingOptions] = None) -> ShootingResult:
    """Solve the shooting system by damped Newton with deterministic multistart.

    Starts: the caller's guess (if any), the zero covector, then seeded unit
    covectors scaled by opts.scales.  Trials run in listed order and the
    first converged one is selected; otherwise the best residual wins (ties
    to the earlier start).  A non-converged result is returned flagged, with
    the best iterate's extremal attached.
    """
    opts = opts or ShootingOptions()
    m = problem.sys.m
    d_a = len(problem.bounds.initial or ())
    free = problem.bounds.mode == "free_time"
    step = opts.step or 1e-3 * (problem.b - problem.a)

    def pad(p_part):
        tail = [problem.b] if free else []
        return np.concatenate([p_part, np.zeros(d_a), tail])

    starts: List[np.ndarray] = []
    if guess is not None:
        g = np.asarray(guess, dtype=float).ravel()
        if g.size != problem.n_unknowns:
            raise ValueError("guess dimension does not match the unknowns")
        starts.append(g)
    starts.append(pad(np.zeros(m)))
    for s in opts.scales:
        for d in unit_directions(m, opts.n_starts, seed=opts.seed):
            starts.append(pad(s * d))

    best = None  # (residual_norm, index, z, iterations, converged)
    for idx, z0 in enumerate(starts):
        z, rn, iters, conv = _newton(problem, z0, opts)
        if conv:
            best = (rn, idx, z, iters, True)
            break
        if np.isfinite(rn) and (best is None or rn < best[0]):
            best = (rn, idx, z, iters, False)
    if best is None:
        raise ShootingFailure("all starts blew up")
    rn, _, z, iters, conv = best
    extremal = _build_extremal(problem, z, opts, step)
    R = boundary_residual(problem, z, opts)
    J = _fd_jacobian(problem, z, R, opts, opts.fd_h)
    jrank = int(np.linalg.matrix_rank(J, tol=1e-8 * max(1.0, float(np.max(np.abs(J))))))
    return ShootingResult(extremal=extremal, residual_norm=rn, iterations=iters,
                          converged=conv, jacobian_rank=jrank,
                          n_unknowns=problem.n_unknowns)


def _format_value(u) -> str:
    comps = ["%+g" % c for c in np.atleast_1d(u)]
    return "u=" + (comps[0] if len(comps) == 1 else "(" + ", ".join(comps) + ")")


def switching_structure(extremal: Extremal,
                        jump_tol: Optional[float] = None) -> SwitchingStructure:
    """Control discontinuities of an extremal with the arc value labels.

    Step-to-step drift below the jump tolerance (a smoothly varying
    maximizer sampled per step) is not a switch; only genuine jumps are
    reported.  Labels carry the value at the start of each arc.
    """
    sig = extremal.control
    vals = [np.asarray(v, dtype=float) for v in sig.values]
    if jump_tol is None:
        system = getattr(extremal.ext_traj, "system", None)
        jump_tol = (_auto_jump_tol(system.control_set)
                    if system is not None else 0.05)
    times: List[float] = []
    labels: List[str] = [_format_value(vals[0])]
    for i, sw in enumerate(sig.switch_times):
        if float(np.max(np.abs(vals[i + 1] - vals[i]))) > jump_tol:
            times.append(float(sw))
            labels.append(_format_value(vals[i + 1]))
    return SwitchingStructure(tuple(times), tuple(labels))
