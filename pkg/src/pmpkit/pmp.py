"""Hamiltonian maximization, adjoint flow, condition checks, classification.

The Hamiltonian of a control system with cost rate F is
H(p0, p, x, u) = p0 F(x, u) + p . f(x, u) with a constant p0 <= 0.  A
candidate trajectory is an extremal when an adjoint curve exists making the
reference control a pointwise maximizer of H, keeping H constant in time
(zero, when the final time is free), with (p0, p) never vanishing and p
annihilating the tangent spaces of the boundary manifolds.  `check_pmp`
measures all of these as residuals on the integration grid;
`classify_extremal` searches terminal covectors for admissible lifts with
p0 = -1 and p0 = 0 separately, emitting strict certificates only when the
complementary search space is provably exhausted.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .cone_geometry import supporting_hyperplane, unit_directions
from .control_system import (
    ControlSignal,
    ControlSystem,
    ExtendedTrajectory,
    Trajectory,
    extend,
    simulate,
)
from .flows import FlowBlowUpError, IntegratorConfig
from ._simplex import linprog_dense


class UnboundedHamiltonianError(RuntimeError):
    """The Hamiltonian grows without bound along a ray of the control set."""


@dataclass
class AdjointCurve:
    """Adjoint covector per grid node, with the constant cost multiplier."""

    grid: np.ndarray
    sigma0: float
    sigma: np.ndarray

    def sigma_at(self, t: float) -> np.ndarray:
        t = float(t)
        if t <= self.grid[0]:
            return self.sigma[0].copy()
        if t >= self.grid[-1]:
            return self.sigma[-1].copy()
        i = int(np.searchsorted(self.grid, t, side="right")) - 1
        t0, t1 = self.grid[i], self.grid[i + 1]
        w = (t - t0) / (t1 - t0)
        return (1.0 - w) * self.sigma[i] + w * self.sigma[i + 1]


@dataclass
class Extremal:
    ext_traj: ExtendedTrajectory
    control: ControlSignal
    adjoint: AdjointCurve


@dataclass
class BoundarySpec:
    """Endpoint conditions: fixed or free final time, point or manifold ends.

    `initial` and `final` are None for point constraints, or a tuple of
    linearly independent tangent vectors for a manifold constraint.
    """

    mode: str
    initial: Optional[Tuple[np.ndarray, ...]] = None
    final: Optional[Tuple[np.ndarray, ...]] = None

    def __post_init__(self):
        if self.mode not in ("fixed_time", "free_time"):
            raise ValueError("mode must be fixed_time or free_time")
        for name in ("initial", "final"):
            basis = getattr(self, name)
            if basis is None:
                continue
            vecs = tuple(np.asarray(w, dtype=float).ravel() for w in basis)
            if vecs:
                B = np.vstack(vecs)
                if np.linalg.matrix_rank(B) < len(vecs):
                    raise ValueError(f"{name} tangent basis is linearly dependent")
            object.__setattr__(self, name, vecs)


@dataclass
class PMPReport:
    """Condition residuals; see check_pmp for what each one measures."""

    res_3a: float
    res_3b: float
    res_3c: float
    res_3d: Tuple[float, bool]
    res_3e: Tuple[float, float]
    classification: str
    tol: float

    def to_json(self) -> str:
        return json.dumps({
            "res_3a": self.res_3a,
            "res_3b": self.res_3b,
            "res_3c": self.res_3c,
            "res_3d": [self.res_3d[0], bool(self.res_3d[1])],
            "res_3e": list(self.res_3e),
            "classification": self.classification,
            "tolerances": {"tol": self.tol},
        })


def hamiltonian(sys: ControlSystem, p0: float, p, x, u) -> float:
    """p0 F(x, u) + p . f(x, u); with p0 = 0 the cost plays no role."""
    p = np.asarray(p, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if p.size != sys.m or x.size != sys.m:
        raise ValueError("dimension mismatch")
    return float(p0) * sys.cost_rate(x, u) + float(p @ sys.dynamics(x, u))


@dataclass
class MaximizeOptions:
    resolution: float = 1e-6
    fit_tol: float = 1e-9
    grid_points: int = 9


@dataclass
class MaximizationResult:
    u_star: np.ndarray
    value: float


def _pick_best(cands, H):
    best_u, best_v = None, -np.inf
    for u in cands:
        v = H(u)
        if v > best_v:
            best_u, best_v = np.asarray(u, dtype=float), v
    return MaximizationResult(best_u, best_v)


def _fit_quadratic(H, u0, delta, fit_tol):
    """Exact-fit quadratic model around u0, or None if H is not quadratic."""
    k = u0.size
    f0 = H(u0)
    b = np.zeros(k)
    A = np.zeros((k, k))
    live = [j for j in range(k) if delta[j] > 0]
    for j in live:
        e = np.zeros(k)
        e[j] = delta[j]
        fp, fm = H(u0 + e), H(u0 - e)
        b[j] = (fp - fm) / (2.0 * delta[j])
        A[j, j] = (fp - 2.0 * f0 + fm) / delta[j] ** 2
    for i, j in itertools.combinations(live, 2):
        e = np.zeros(k)
        e[i] = delta[i]
        e[j] = delta[j]
        ei = np.zeros(k)
        ei[i] = delta[i]
        ej = np.zeros(k)
        ej[j] = delta[j]
        mixed = (H(u0 + e) - H(u0 + ei) - H(u0 + ej) + f0) / (delta[i] * delta[j])
        A[i, j] = A[j, i] = mixed

    def model(u):
        d = u - u0
        return f0 + b @ d + 0.5 * d @ A @ d

    scale = 1.0 + abs(f0) + float(np.max(np.abs(b))) + float(np.max(np.abs(A)))
    for coeffs in ((0.37,) * k, (-0.61,) * k,
                   tuple(0.5 if j % 2 == 0 else -0.5 for j in range(k))):
        probe = u0 + np.array(coeffs) * delta
        if abs(H(probe) - model(probe)) > fit_tol * scale:
            return None
    return f0, b, A


def _axis_max(b, a, lo, hi, u0j, tol):
    """Maximize b t + a t^2 / 2 for u0j + t in [lo, hi]; returns the u value."""
    if abs(a) <= tol:
        if b > tol:
            if np.isinf(hi):
                raise UnboundedHamiltonianError("linear growth toward +inf")
            return hi
        if b < -tol:
            if np.isinf(lo):
                raise UnboundedHamiltonianError("linear growth toward -inf")
            return lo
        if np.isfinite(lo):
            return lo
        if np.isfinite(hi):
            return hi
        return u0j
    if a < 0:
        return float(np.clip(u0j - b / a, lo, hi))
    # convex axis: maximum at an endpoint
    if np.isinf(lo) or np.isinf(hi):
        raise UnboundedHamiltonianError("convex growth on an unbounded axis")
    tl, th = lo - u0j, hi - u0j
    return lo if b * tl + 0.5 * a * tl * tl >= b * th + 0.5 * a * th * th else hi


def _grid_refine(H, lo, hi, opts):
    if lo.size > 3:
        raise ValueError("grid refinement supports at most 3 control dimensions")
    cur_lo, cur_hi = lo.copy(), hi.copy()
    g = opts.grid_points
    best = None
    for _ in range(60):
        axes = [np.linspace(cur_lo[j], cur_hi[j], g) for j in range(lo.size)]
        best_u, best_v = None, -np.inf
        for combo in itertools.product(*axes):
            u = np.array(combo)
            v = H(u)
            if v > best_v:
                best_u, best_v = u, v
        best = MaximizationResult(best_u, best_v)
        cell = (cur_hi - cur_lo) / (g - 1)
        if np.max(cell) <= opts.resolution:
            return best
        cur_lo = np.maximum(lo, best_u - cell)
        cur_hi = np.minimum(hi, best_u + cell)
    return best


def maximize_hamiltonian(sys: ControlSystem, p0: float, p, x,
                         opts: Optional[MaximizeOptions] = None) -> MaximizationResult:
    """Pointwise supremum of H over the control set.

    Finite sets are enumerated (first listed wins ties).  Boxes are handled
    exactly whenever H is numerically quadratic in u (verified by an
    exact-fit test): linear coefficients pick vertices, concave axes or a
    concave coupled model pick stationary points, with unbounded growth along
    an infinite side reported as an error.  Non-quadratic H on a finite box
    falls back to deterministic grid refinement.
    """
    opts = opts or MaximizeOptions()

    def H(u):
        return hamiltonian(sys, p0, p, x, u)

    U = sys.control_set
    if U.kind == "finite":
        return _pick_best(U.points, H)

    if U.kind == "ball":
        c, R = U.center, U.radius
        k = c.size
        delta = np.full(k, max(R, 1.0) / 4.0)
        fit = _fit_quadratic(H, c.copy(), delta, opts.fit_tol)
        if fit is not None:
            _, b, A = fit
            scale = 1.0 + np.max(np.abs(b)) + np.max(np.abs(A))
            if np.max(np.abs(A)) <= opts.fit_tol * scale:
                nb = np.linalg.norm(b)
                u = c + R * b / nb if nb > opts.fit_tol * scale else c.copy()
                return MaximizationResult(u, H(u))
        cands = [c.copy()]
        for r in np.linspace(R / 8.0, R, 8):
            for d in unit_directions(k, 32, seed=0):
                cands.append(c + r * d)
        return _pick_best(cands, H)

    lo, hi = U.lo, U.hi
    k = lo.size
    u0 = np.empty(k)
    delta = np.empty(k)
    for j in range(k):
        if np.isfinite(lo[j]) and np.isfinite(hi[j]):
            u0[j] = 0.5 * (lo[j] + hi[j])
            delta[j] = (hi[j] - lo[j]) / 4.0
        elif np.isfinite(lo[j]):
            u0[j], delta[j] = lo[j] + 1.0, 1.0
        elif np.isfinite(hi[j]):
            u0[j], delta[j] = hi[j] - 1.0, 1.0
        else:
            u0[j], delta[j] = 0.0, 1.0

    fit = _fit_quadratic(H, u0, delta, opts.fit_tol)
    if fit is not None:
        _, b, A = fit
        scale = 1.0 + float(np.max(np.abs(b))) + float(np.max(np.abs(A)))
        ztol = opts.fit_tol * scale
        off_diag = np.max(np.abs(A - np.diag(np.diag(A)))) if k > 1 else 0.0
        if off_diag <= ztol:
            u = np.array([
                _axis_max(b[j], A[j, j], lo[j], hi[j], u0[j], ztol)
                if delta[j] > 0 else lo[j]
                for j in range(k)
            ])
            return MaximizationResult(u, H(u))
        eigs = np.linalg.eigvalsh(A)
        if eigs.max() < -ztol:
            u_star = u0 + np.linalg.solve(A, -b)
            if np.all(u_star >= lo - 1e-12) and np.all(u_star <= hi + 1e-12):
                u_star = np.clip(u_star, lo, hi)
                return MaximizationResult(u_star, H(u_star))
            if np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)):
                return _grid_refine(H, lo, hi, opts)
            raise RuntimeError("coupled concave maximization with mixed "
                               "infinite bounds is not supported")
        if np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)):
            return _grid_refine(H, lo, hi, opts)
        raise UnboundedHamiltonianError("non-concave quadratic on an unbounded box")
    if np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)):
        return _grid_refine(H, lo, hi, opts)
    raise UnboundedHamiltonianError("non-quadratic Hamiltonian on an unbounded box")


def adjoint_flow(sys: ControlSystem, traj: Trajectory, p0: float, p_b) -> AdjointCurve:
    """Integrate p' = -p0 grad_x F - (df/dx)^T p backward along the trajectory.

    Runs on the trajectory's own grid (shared-grid invariant for extremals);
    p0 is constant because the extended dynamics never depend on the cost
    coordinate.
    """
    p = np.asarray(p_b, dtype=float).ravel()
    if p.size != sys.m:
        raise ValueError("terminal covector has the wrong dimension")
    grid = traj.grid
    n = len(grid)
    sigma = np.empty((n, sys.m))
    sigma[n - 1] = p
    for i in range(n - 1, 0, -1):
        t1, t0 = float(grid[i]), float(grid[i - 1])
        h = t0 - t1
        uval = traj.control.value_at(0.5 * (t0 + t1))

        def rhs(t, q):
            xx = traj.state_at(t)
            return -p0 * sys.cost_grad_x(xx, uval) - sys.jac_x(xx, uval).T @ q

        k1 = rhs(t1, p)
        k2 = rhs(t1 + 0.5 * h, p + 0.5 * h * k1)
        k3 = rhs(t1 + 0.5 * h, p + 0.5 * h * k2)
        k4 = rhs(t0, p + h * k3)
        p = p + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(p)):
            raise FlowBlowUpError(t0)
        sigma[i - 1] = p
    return AdjointCurve(grid=grid.copy(), sigma0=float(p0), sigma=sigma)


@dataclass
class PMPCheckOptions:
    tol: float = 1e-6
    maximize: Optional[MaximizeOptions] = None


def check_pmp(sys: ControlSystem, extremal: Extremal, bounds: BoundarySpec,
              opts: Optional[PMPCheckOptions] = None) -> PMPReport:
    """Evaluate all maximum-principle conditions on the shared grid.

    res_3a: worst gap sup_u H - H(u(t)) over non-switch nodes.
    res_3b: worst deviation of sup_u H from its grid median (fixed time) or
            from zero (free time).
    res_3c: minimum of |(p0, p(t))| over the grid (must stay positive).
    res_3d: (p0 drift, sign flag p0 <= 0); the drift is zero by storage.
    res_3e: worst |p(a) . w| over the initial tangent basis and worst
            |p(b) . w| over the final one (zero when the end is a point).
    classification: normal/abnormal by the sign of p0 when every condition
    passes at the report tolerance, undetermined otherwise.
    """
    opts = opts or PMPCheckOptions()
    tol = opts.tol
    adj = extremal.adjoint
    traj = extremal.ext_traj
    u = extremal.control
    if len(traj.grid) != len(adj.grid) or np.max(np.abs(traj.grid - adj.grid)) > 1e-12:
        raise ValueError("trajectory and adjoint grids do not match")
    states = traj.states[:, 1:] if traj.states.shape[1] == sys.m + 1 else traj.states
    if states.shape[1] != sys.m:
        raise ValueError("state dimension mismatch")
    p0 = adj.sigma0

    switch = set(u.switch_times)
    gaps: List[float] = []
    sups: List[float] = []
    for i, t in enumerate(traj.grid):
        mn = np.sqrt(p0 * p0 + float(adj.sigma[i] @ adj.sigma[i]))
        if i == 0:
            min_norm = mn
        else:
            min_norm = min(min_norm, mn)
        if any(abs(t - s) <= 1e-12 * (1.0 + abs(s)) for s in switch):
            continue
        mx = maximize_hamiltonian(sys, p0, adj.sigma[i], states[i], opts.maximize)
        href = hamiltonian(sys, p0, adj.sigma[i], states[i], u.value_at(float(t)))
        gaps.append(max(mx.value - href, 0.0))
        sups.append(mx.value)
    sups_arr = np.array(sups)
    res_3a = float(np.max(gaps))
    if bounds.mode == "free_time":
        res_3b = float(np.max(np.abs(sups_arr)))
    else:
        res_3b = float(np.max(np.abs(sups_arr - np.median(sups_arr))))
    res_3c = float(min_norm)
    sign_ok = bool(p0 <= tol)
    res_3d = (0.0, sign_ok)
    ri = max((abs(float(adj.sigma[0] @ w)) for w in (bounds.initial or ())), default=0.0)
    rf = max((abs(float(adj.sigma[-1] @ w)) for w in (bounds.final or ())), default=0.0)
    res_3e = (ri, rf)

    passes = (res_3a <= tol and res_3b <= tol and res_3c > tol and sign_ok
              and ri <= tol and rf <= tol)
    if not passes:
        cls = "undetermined"
    elif p0 <= -tol:
        cls = "normal"
    else:
        cls = "abnormal"
    return PMPReport(res_3a=res_3a, res_3b=res_3b, res_3c=res_3c, res_3d=res_3d,
                     res_3e=res_3e, classification=cls, tol=tol)


def terminal_covector_from_cone(cone_b, final_tangent_basis=None,
                                tol: float = 1e-9) -> Optional[np.ndarray]:
    """Separating covector for a perturbation cone on the extended space.

    Finds a nonzero sigma_hat (cost component first) with sigma_hat . g <= 0
    for every generator, sigma_hat_0 <= 0, and sigma_hat annihilating the
    lifted final tangent basis.  Prefers sigma_hat_0 = -1; falls back to
    sigma_hat_0 = 0; returns None when no such covector exists, which
    certifies that the downward cost direction is interior to the cone.
    """
    cone = cone_b.cone if hasattr(cone_b, "cone") else cone_b
    n = cone.n
    m = n - 1
    gens = [np.asarray(g, dtype=float) for g in cone.generators]
    basis = [np.asarray(w, dtype=float).ravel() for w in (final_tangent_basis or [])]

    # stage 1: sigma_hat = (-1, p); constraints p . g_x <= g_0, p . w = 0.
    # Split p = p_pos - p_neg and minimize the l1 norm so the canonical
    # small solution comes back when the feasible set is fat.
    if m > 0:
        A_ub = ([np.concatenate((g[1:], -g[1:])) for g in gens]
                if gens else None)
        b_ub = [float(g[0]) for g in gens] if gens else None
        A_eq = ([np.concatenate((w, -w)) for w in basis] if basis else None)
        b_eq = [0.0] * len(basis) if basis else None
        res = linprog_dense(np.ones(2 * m),
                            A_ub=np.array(A_ub) if A_ub else None,
                            b_ub=np.array(b_ub) if b_ub else None,
                            A_eq=np.array(A_eq) if A_eq else None,
                            b_eq=np.array(b_eq) if b_eq else None,
                            bounds=[(0.0, 1e6)] * (2 * m))
        if res.ok:
            return np.concatenate(([-1.0], res.x[:m] - res.x[m:]))
    else:
        if all(g[0] >= -tol for g in gens):
            return np.array([-1.0])

    # stage 2: sigma_hat = (0, p), p nonzero supporting the projected cone
    from .cone_geometry import GeneratedCone
    proj = [g[1:] for g in gens] + [w for w in basis] + [-w for w in basis]
    proj_cone = GeneratedCone(proj, n=m) if m > 0 else None
    if proj_cone is None:
        return None
    alpha = supporting_hyperplane(proj_cone, tol)
    if alpha is None:
        return None
    return np.concatenate(([0.0], alpha))


@dataclass
class ClassifyOptions:
    tol: float = 1e-6
    n_dirs: int = 8
    scales: Tuple[float, ...] = (0.1, 1.0, 10.0)
    cfg: Optional[IntegratorConfig] = None
    maximize: Optional[MaximizeOptions] = None


@dataclass
class ClassificationResult:
    classification: str
    certificate: Optional[str]
    normal_terminal: Optional[np.ndarray]
    abnormal_terminal: Optional[np.ndarray]
    attempts: Tuple[dict, ...]


def _null_space(rows: Sequence[np.ndarray], m: int) -> np.ndarray:
    if not rows:
        return np.eye(m)
    A = np.vstack(rows)
    _, s, Vt = np.linalg.svd(A)
    rank = int(np.sum(s > max(1e-12, 1e-12 * (s[0] if len(s) else 1.0))))
    return Vt[rank:].T


def classify_extremal(sys: ControlSystem, traj: Trajectory, control: ControlSignal,
                      bounds: BoundarySpec,
                      opts: Optional[ClassifyOptions] = None) -> ClassificationResult:
    """Search for admissible adjoint lifts with p0 = -1 and p0 = 0.

    Terminal covectors are drawn from the annihilator of the final tangent
    basis (plus the H(b) = 0 hyperplane in free-time mode).  The p0 = 0
    problem is positively homogeneous, so each ray is decided exactly: the
    ray carries a lift iff its worst residual is smaller than its minimum
    covector norm.  Strict certificates are only claimed when that ray space
    has dimension <= 1 (both rays enumerable) or dimension 0; the analogous
    rule covers p0 = -1 when its affine candidate space is a single point.
    """
    opts = opts or ClassifyOptions()
    if sys.extended:
        raise ValueError("classify_extremal expects the base control system")
    m = sys.m
    x0 = np.asarray(traj.states[0], dtype=float).ravel()
    if x0.size != m:
        raise ValueError("trajectory state dimension does not match the system")
    span = control.b - control.a
    cfg = opts.cfg or IntegratorConfig(step=1e-2 * span)
    free = bounds.mode == "free_time"

    base = simulate(sys, control, x0, cfg)
    ext_traj = simulate(extend(sys), control, np.concatenate(([0.0], x0)), cfg)
    f_b = sys.dynamics(base.endpoint, control.value_at(control.b))
    F_b = sys.cost_rate(base.endpoint, control.value_at(control.b))
    final_rows = [np.asarray(w, float) for w in (bounds.final or ())]

    check_opts = PMPCheckOptions(tol=opts.tol, maximize=opts.maximize)
    attempts: List[dict] = []

    def residuals(p0, p_b):
        """(max residual, min covector norm, reason) for one candidate lift."""
        try:
            adj = adjoint_flow(sys, base, p0, p_b)
            rep = check_pmp(sys, Extremal(ext_traj, control, adj), bounds, check_opts)
        except UnboundedHamiltonianError as e:
            return np.inf, 0.0, f"unbounded Hamiltonian: {e}"
        worst = max(rep.res_3a, rep.res_3b, rep.res_3e[0], rep.res_3e[1])
        return worst, rep.res_3c, ""

    # p0 = 0: ray space is the annihilator of the final basis (and of f(b)
    # in free-time mode, since sup H = p . f must vanish at b)
    abn_rows = final_rows + ([f_b] if free else [])
    N0 = _null_space(abn_rows, m)
    abn_dim = N0.shape[1]
    abnormal_terminal = None
    abn_exhaustive = abn_dim <= 1
    abn_reasons: List[str] = []
    if abn_dim == 0:
        abn_reasons.append("annihilator is trivial, only the zero covector remains")
    else:
        if abn_dim == 1:
            rays = [N0[:, 0], -N0[:, 0]]
        else:
            rays = [N0 @ d for d in unit_directions(abn_dim, opts.n_dirs)]
        for ray in rays:
            worst, min_norm, reason = residuals(0.0, ray)
            # the p0 = 0 problem is homogeneous, so judge the ray by the
            # scale-invariant ratio residual / covector norm
            rel = worst / min_norm if min_norm > 0 else np.inf
            feasible = rel <= opts.tol
            attempts.append({"p0": 0.0, "p_b": ray.tolist(),
                             "feasible": bool(feasible),
                             "reason": reason or f"relative residual {rel:.3e}"})
            if feasible and abnormal_terminal is None:
                abnormal_terminal = ray
            elif not feasible:
                abn_reasons.append(
                    reason or f"ray {np.round(ray, 6).tolist()}: "
                              f"relative residual {rel:.3e} above tolerance")

    # p0 = -1: candidates from the annihilator, plus the affine slice
    # p . f(b) = F(b) in free-time mode
    Nf = _null_space(final_rows, m)
    normal_terminal = None
    nrm_cands: List[np.ndarray] = [np.zeros(m)]
    if Nf.shape[1] >= 1:
        dirs = ([Nf[:, 0], -Nf[:, 0]] if Nf.shape[1] == 1
                else [Nf @ d for d in unit_directions(Nf.shape[1], opts.n_dirs)])
        for s in opts.scales:
            nrm_cands.extend(s * d for d in dirs)
    nrm_dim = Nf.shape[1]
    if free:
        rows = final_rows + [f_b]
        rhs = [0.0] * len(final_rows) + [F_b]
        A = np.vstack(rows)
        sol, holds = np.linalg.lstsq(A, np.array(rhs), rcond=None)[0], True
        if np.linalg.norm(A @ sol - np.array(rhs)) > 1e-9 * (1.0 + abs(F_b)):
            holds = False
        if holds:
            Na = _null_space(rows, m)
            nrm_dim = Na.shape[1]
            cal = [sol]
            if Na.shape[1] >= 1:
                cdirs = ([Na[:, 0], -Na[:, 0]] if Na.shape[1] == 1
                         else [Na @ d for d in unit_directions(Na.shape[1], opts.n_dirs)])
                for s in opts.scales:
                    cal.extend(sol + s * d for d in cdirs)
            nrm_cands = cal + nrm_cands
        else:
            nrm_dim = -1  # no admissible normal covector satisfies H(b) = 0
            nrm_cands = []
    nrm_reasons: List[str] = []
    for cand in nrm_cands:
        worst, min_norm, reason = residuals(-1.0, cand)
        feasible = worst <= opts.tol and min_norm > opts.tol
        attempts.append({"p0": -1.0, "p_b": np.asarray(cand).tolist(),
                         "feasible": bool(feasible),
                         "reason": reason or f"worst {worst:.3e}"})
        if feasible:
            normal_terminal = np.asarray(cand, dtype=float)
            break
        nrm_reasons.append(reason or f"residual {worst:.3e}")
    # a certificate against normal lifts needs the admissible terminal set
    # to be a single point (dim 0) or provably empty (dim -1)
    nrm_exhaustive = nrm_dim <= 0

    certificate = None
    if normal_terminal is not None:
        if abnormal_terminal is None and abn_exhaustive:
            certificate = ("no abnormal lift exists: " + "; ".join(abn_reasons))
            classification = "strict_normal_certificate"
        else:
            classification = "normal"
    elif abnormal_terminal is not None:
        if nrm_exhaustive:
            certificate = ("no normal lift exists: " +
                           ("; ".join(nrm_reasons) if nrm_reasons
                            else "the H(b)=0 slice is empty"))
            classification = "strict_abnormal_certificate"
        else:
            classification = "abnormal"
    else:
        classification = "undetermined"
    return ClassificationResult(classification=classification,
                                certificate=certificate,
                                normal_terminal=normal_terminal,
                                abnormal_terminal=abnormal_terminal,
                                attempts=tuple(attempts))
