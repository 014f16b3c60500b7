"""Needle variations, perturbation vectors and cones, and direction realization.

A needle variation replaces the reference control by a fixed value u1 on the
shrinking interval [t1 - l1 s, t1].  To first order in s the endpoint of the
perturbed trajectory moves along the class-I vector l1 (f(x, u1) - f(x, u)),
and transporting these vectors along the reference flow and taking conic
combinations produces the perturbation cones.  `realize_direction` is the
effective converse: given an interior direction of a cone, it assembles an
actual composite needle perturbation whose endpoint lands on the ray through
that direction, by solving a small fixed-point problem in the hyperplane
transverse to the direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .cone_geometry import (
    BoundaryConditionError,
    GeneratedCone,
    RootSearchError,
    cone_residual,
    conic_membership,
    covered_point_root,
    membership_margin,
    positive_combination,
)
from .control_system import (
    ControlSignal,
    ControlSystem,
    Trajectory,
    lebesgue_times,
    simulate,
)
from .flows import IntegratorConfig, TangentState, TimeVectorField, tangent_lift_flow


class NeedleLayoutError(ValueError):
    """Needle interval escapes the horizon or overlaps another needle."""


class RealizationError(RuntimeError):
    """Direction realization exhausted its budget; carries the best residual."""

    def __init__(self, best_residual, last_s):
        super().__init__(
            "could not realize the direction: best residual %.3e at s=%.3e"
            % (best_residual, last_s))
        self.best_residual = best_residual
        self.last_s = last_s


class _TransverseFailure(RuntimeError):
    """Endpoint deviation lost the positive component along the target."""


@dataclass(frozen=True)
class NeedleData:
    """Needle variation data: value u1 on [t1 - l1 s, t1]."""

    t1: float
    l1: float
    u1: np.ndarray

    def __post_init__(self):
        if self.l1 < 0:
            raise ValueError("needle length rate must be nonnegative")
        object.__setattr__(self, "u1", np.asarray(self.u1, dtype=float).ravel())


@dataclass(frozen=True)
class TimePerturbationData:
    """Needle data plus a final-time rate delta_tau."""

    tau: float
    l_tau: float
    delta_tau: float
    u_tau: np.ndarray

    def __post_init__(self):
        if self.l_tau < 0:
            raise ValueError("needle length rate must be nonnegative")
        object.__setattr__(self, "u_tau", np.asarray(self.u_tau, dtype=float).ravel())


@dataclass(frozen=True)
class PerturbationVector:
    base_time: float
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite perturbation vector")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class Provenance:
    """How a cone generator was produced.

    kind is one of "needle", "axis+", "axis-", "init+", "init-".  Needle
    generators carry their NeedleData, axis generators a final-time rate of
    +-1, initial-manifold generators the signed tangent vector at the start.
    """

    kind: str
    source_time: float
    needle: Optional[NeedleData] = None
    delta_tau: float = 0.0
    initial_vector: Optional[np.ndarray] = None


@dataclass
class PerturbationCone:
    """Generated cone at a fixed time with per-generator provenance."""

    at_time: float
    cone: GeneratedCone
    provenance: Tuple[Provenance, ...]
    control_dim: int = 0

    def to_csv(self, path) -> None:
        k = self.control_dim
        header = "tau,l," + ",".join(f"u{j}" for j in range(k)) + ",kind"
        lines = [header]
        for p in self.provenance:
            if p.kind == "needle":
                tau, l, u = p.needle.t1, p.needle.l1, p.needle.u1
            else:
                tau, l, u = p.source_time, 0.0, np.zeros(k)
            cols = [f"{tau:.17g}", f"{l:.17g}"] + [f"{x:.17g}" for x in u] + [p.kind]
            lines.append(",".join(cols))
        text = "\n".join(lines) + "\n"
        if hasattr(path, "write"):
            path.write(text)
        else:
            with open(path, "w") as fh:
                fh.write(text)


def _assemble_cone(at_time, m, k, gens, prov) -> PerturbationCone:
    # mirror GeneratedCone's zero/duplicate dropping to keep provenance aligned
    keep_g: List[np.ndarray] = []
    keep_p: List[Provenance] = []
    for g, p in zip(gens, prov):
        g = np.asarray(g, dtype=float)
        if not g.any():
            continue
        if any(np.array_equal(g, h) for h in keep_g):
            continue
        keep_g.append(g)
        keep_p.append(p)
    cone = GeneratedCone(keep_g, n=m)
    assert len(cone.generators) == len(keep_p)
    return PerturbationCone(at_time=float(at_time), cone=cone,
                            provenance=tuple(keep_p), control_dim=k)


def _control_field(sys: ControlSystem, u: ControlSignal) -> TimeVectorField:
    return TimeVectorField(
        sys.m,
        lambda t, x: sys.dynamics(x, u.value_at(t)),
        lambda t, x: sys.jac_x(x, u.value_at(t)),
    )


def _require_lebesgue(u: ControlSignal, t: float) -> None:
    if not lebesgue_times(u, [t]):
        raise ValueError(f"t={t!r} is not an interior Lebesgue time (switch or endpoint)")


def _override(u: ControlSignal, lo: float, hi: float, val: np.ndarray) -> ControlSignal:
    pts = sorted({u.a, u.b, lo, hi, *u.switch_times})
    vals = []
    for p, q in zip(pts, pts[1:]):
        mid = 0.5 * (p + q)
        vals.append(np.asarray(val, dtype=float) if lo <= mid < hi else u.value_at(mid))
    # merge equal neighbours
    switches: List[float] = []
    merged = [vals[0]]
    for p, v in zip(pts[1:-1], vals[1:]):
        if np.array_equal(v, merged[-1]):
            continue
        switches.append(p)
        merged.append(v)
    return ControlSignal(a=u.a, b=u.b, switch_times=tuple(switches), values=tuple(merged))


def apply_needle(u: ControlSignal, pi: NeedleData, s: float) -> ControlSignal:
    """Insert the needle value on [t1 - l1 s, t1]; zero length is a no-op."""
    if s <= 0:
        raise ValueError("needle scale s must be positive")
    if pi.l1 == 0.0:
        return u
    lo = pi.t1 - pi.l1 * s
    hi = pi.t1
    if not (u.a < lo and hi <= u.b):
        raise NeedleLayoutError(
            f"needle interval [{lo!r}, {hi!r}] escapes ({u.a!r}, {u.b!r}]")
    return _override(u, lo, hi, pi.u1)


def apply_needle_suite(u: ControlSignal, needles: Sequence[NeedleData],
                       s: float) -> ControlSignal:
    """Apply several needles at scale s.

    Needles sharing a time are stacked leftward with the later-listed needle
    innermost: for lengths l', l'' at t1 the intervals are
    [t1-(l'+l'')s, t1-l''s] and [t1-l''s, t1].  Needle groups at distinct
    times must produce disjoint intervals.
    """
    if s <= 0:
        raise ValueError("needle scale s must be positive")
    groups: dict = {}
    order: List[float] = []
    for n in needles:
        if n.l1 == 0.0:
            continue
        if n.t1 not in groups:
            groups[n.t1] = []
            order.append(n.t1)
        groups[n.t1].append(n)
    pieces: List[Tuple[float, float, np.ndarray]] = []
    spans: List[Tuple[float, float]] = []
    for t1 in order:
        hi = t1
        for n in reversed(groups[t1]):
            lo = hi - n.l1 * s
            pieces.append((lo, hi, n.u1))
            hi = lo
        if not (u.a < hi and t1 <= u.b):
            raise NeedleLayoutError(
                f"stacked needle interval [{hi!r}, {t1!r}] escapes ({u.a!r}, {u.b!r}]")
        spans.append((hi, t1))
    spans.sort()
    for (lo1, hi1), (lo2, hi2) in zip(spans, spans[1:]):
        if lo2 < hi1:
            raise NeedleLayoutError(
                f"needle intervals [{lo1!r},{hi1!r}] and [{lo2!r},{hi2!r}] overlap")
    out = u
    for lo, hi, val in pieces:
        out = _override(out, lo, hi, val)
    return out


def class1_vector(sys: ControlSystem, traj: Trajectory, pi: NeedleData) -> PerturbationVector:
    """l1 (f(x, u1) - f(x, u(t1))) at x = gamma(t1)."""
    _require_lebesgue(traj.control, pi.t1)
    x = traj.state_at(pi.t1)
    uref = traj.control.value_at(pi.t1)
    vec = pi.l1 * (sys.dynamics(x, pi.u1) - sys.dynamics(x, uref))
    return PerturbationVector(base_time=pi.t1, vector=vec)


def transport_vector(sys: ControlSystem, traj: Trajectory, v: PerturbationVector,
                     t: float, cfg: Optional[IntegratorConfig] = None) -> PerturbationVector:
    """Push v forward from its base time to t by the variational flow along traj."""
    t = float(t)
    base = float(v.base_time)
    if t < base:
        raise ValueError("can only transport forward in time")
    if t == base:
        return PerturbationVector(base_time=t, vector=v.vector.copy())
    cfg = cfg or IntegratorConfig()
    merged = IntegratorConfig(step=cfg.step, method=cfg.method,
                              event_times=tuple(cfg.event_times) + tuple(traj.control.switch_times))
    X = _control_field(sys, traj.control)
    out = tangent_lift_flow(X, t, base, TangentState(traj.state_at(base), v.vector), merged)
    return PerturbationVector(base_time=t, vector=out.v)


def multi_needle_vector(sys: ControlSystem, traj: Trajectory,
                        needles: Sequence[NeedleData], t: float,
                        cfg: Optional[IntegratorConfig] = None) -> PerturbationVector:
    """Sum of the transported class-I vectors of an ordered needle list."""
    if not needles:
        raise ValueError("need at least one needle")
    times = [n.t1 for n in needles]
    if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
        raise ValueError("needles must be ordered by time")
    if times[-1] > t:
        raise ValueError("needle times must not exceed the evaluation time")
    total = np.zeros(sys.m)
    for n in needles:
        total = total + transport_vector(sys, traj, class1_vector(sys, traj, n), t, cfg).vector
    return PerturbationVector(base_time=float(t), vector=total)


def time_perturbation_vector(sys: ControlSystem, traj: Trajectory,
                             pi: TimePerturbationData) -> PerturbationVector:
    """f(x, u(tau)) delta_tau + l_tau (f(x, u_tau) - f(x, u(tau))) at x = gamma(tau)."""
    _require_lebesgue(traj.control, pi.tau)
    x = traj.state_at(pi.tau)
    uref = traj.control.value_at(pi.tau)
    drift = sys.dynamics(x, uref)
    vec = drift * pi.delta_tau + pi.l_tau * (sys.dynamics(x, pi.u_tau) - drift)
    return PerturbationVector(base_time=pi.tau, vector=vec)


def _needle_generator(sys, traj, tau, u1, t, cfg):
    base = class1_vector(sys, traj, NeedleData(t1=tau, l1=1.0, u1=u1))
    return transport_vector(sys, traj, base, t, cfg).vector


def build_tangent_cone(sys: ControlSystem, traj: Trajectory, t: float, sampling,
                       cfg: Optional[IntegratorConfig] = None) -> PerturbationCone:
    """Cone of transported unit-rate class-I vectors over a (times x controls) sampling.

    The closure over all Lebesgue times and all admissible values is
    approximated by the finite sampling the caller supplies; provenance makes
    every generator reproducible.
    """
    times = list(sampling["times"])
    controls = [np.asarray(c, dtype=float).ravel() for c in sampling["controls"]]
    if not times or not controls:
        raise ValueError("sampling must list at least one time and one control")
    gens, prov = [], []
    for tau in times:
        tau = float(tau)
        if tau > t:
            raise ValueError("sampled times must not exceed the cone time")
        for u1 in controls:
            nd = NeedleData(t1=tau, l1=1.0, u1=u1)
            gens.append(_needle_generator(sys, traj, tau, u1, t, cfg))
            prov.append(Provenance(kind="needle", source_time=tau, needle=nd))
    return _assemble_cone(t, sys.m, sys.k, gens, prov)


def build_time_cone(sys: ControlSystem, traj: Trajectory, t: float, sampling,
                    cfg: Optional[IntegratorConfig] = None) -> PerturbationCone:
    """Tangent cone plus the +-f(gamma(t), u(t)) final-time axis."""
    _require_lebesgue(traj.control, t)
    base = build_tangent_cone(sys, traj, t, sampling, cfg)
    drift = sys.dynamics(traj.state_at(t), traj.control.value_at(t))
    gens = list(base.cone.generators) + [drift, -drift]
    prov = list(base.provenance) + [
        Provenance(kind="axis+", source_time=float(t), delta_tau=1.0),
        Provenance(kind="axis-", source_time=float(t), delta_tau=-1.0),
    ]
    return _assemble_cone(t, sys.m, sys.k, gens, prov)


def build_initial_cone(sys: ControlSystem, traj: Trajectory, t: float,
                       Sa_tangent_basis: Sequence[np.ndarray], sampling,
                       cfg: Optional[IntegratorConfig] = None) -> PerturbationCone:
    """Time cone plus +- the transported initial-manifold tangent basis."""
    base = build_time_cone(sys, traj, t, sampling, cfg)
    gens = list(base.cone.generators)
    prov = list(base.provenance)
    a = traj.a
    for w in Sa_tangent_basis:
        w = np.asarray(w, dtype=float).ravel()
        for sgn, kind in ((1.0, "init+"), (-1.0, "init-")):
            moved = transport_vector(sys, traj, PerturbationVector(a, sgn * w), t, cfg)
            gens.append(moved.vector)
            prov.append(Provenance(kind=kind, source_time=a, initial_vector=sgn * w))
    return _assemble_cone(t, sys.m, sys.k, gens, prov)


@dataclass
class TransportReport:
    """Result of pushing a cone forward and re-checking membership."""

    max_violation: float
    axis_defect: float
    memberships: Tuple[str, ...]
    cone: PerturbationCone


def cone_transport_check(sys: ControlSystem, traj: Trajectory, t1: float, t2: float,
                         cone_t1: PerturbationCone,
                         cfg: Optional[IntegratorConfig] = None) -> TransportReport:
    """Transport every generator from t1 to t2 and check membership in the
    cone rebuilt at t2 from the same provenance.

    Also reports the drift-axis identity defect: the transported
    f(gamma(t1), u(t1)) against f(gamma(t2), u(t2)), equal when the control
    does not switch in between.
    """
    if t2 < t1:
        raise ValueError("need t1 <= t2")
    gens2, prov2 = [], []
    for p in cone_t1.provenance:
        if p.kind == "needle":
            gens2.append(_needle_generator(sys, traj, p.needle.t1, p.needle.u1, t2, cfg))
        elif p.kind in ("axis+", "axis-"):
            drift2 = sys.dynamics(traj.state_at(t2), traj.control.value_at(t2))
            gens2.append(p.delta_tau * drift2)
        else:
            gens2.append(transport_vector(
                sys, traj, PerturbationVector(p.source_time, p.initial_vector), t2, cfg).vector)
        prov2.append(p)
    cone2 = _assemble_cone(t2, sys.m, sys.k, gens2, prov2)

    worst = 0.0
    verdicts = []
    for g in cone_t1.cone.generators:
        moved = transport_vector(sys, traj, PerturbationVector(t1, g), t2, cfg).vector
        worst = max(worst, cone_residual(cone2.cone, moved))
        verdicts.append(conic_membership(cone2.cone, moved))

    drift1 = sys.dynamics(traj.state_at(t1), traj.control.value_at(t1))
    moved_drift = transport_vector(sys, traj, PerturbationVector(t1, drift1), t2, cfg).vector
    drift2 = sys.dynamics(traj.state_at(t2), traj.control.value_at(t2))
    axis_defect = float(np.linalg.norm(moved_drift - drift2))
    return TransportReport(max_violation=worst, axis_defect=axis_defect,
                           memberships=tuple(verdicts), cone=cone2)


@dataclass
class RealizationOptions:
    """Tuning for realize_direction.

    tol bounds the final ray-miss distance relative to s; s0 is the first
    needle scale tried, halved on each geometric failure; cfg is the
    integrator configuration used for every endpoint simulation.
    """

    tol: float = 0.02
    s0: float = 1e-2
    max_attempts: int = 8
    cfg: Optional[IntegratorConfig] = None
    boundary_samples: Optional[int] = None
    root_max_iter: int = 60


@dataclass
class RealizationResult:
    s: float
    s_prime: float
    control: ControlSignal
    endpoint: np.ndarray
    eval_time: float
    residual: float


def _clip_signal(u: ControlSignal, b_new: float) -> ControlSignal:
    """Restrict (or extend, holding the last value) the signal to [a, b_new]."""
    if b_new == u.b:
        return u
    if b_new > u.b:
        return ControlSignal(a=u.a, b=b_new, switch_times=u.switch_times, values=u.values)
    keep = [s for s in u.switch_times if s < b_new]
    return ControlSignal(a=u.a, b=b_new, switch_times=tuple(keep),
                         values=u.values[:len(keep) + 1])


def realize_direction(sys: ControlSystem, traj: Trajectory, t: float, v,
                      cone: PerturbationCone,
                      opts: Optional[RealizationOptions] = None) -> RealizationResult:
    """Build a composite needle perturbation whose endpoint meets gamma(t) + s'v.

    v must be interior to the (full-dimensional) cone.  The direction is
    written as a strictly positive combination of the generators; each nearby
    direction v + r gets its own combination lam(r) = lam* + W^+ r, and the
    associated perturbation scales the provenance needles by lam and collects
    the net final-time rate from the axis generators (free-time evaluation at
    t + s delta_t).  A fixed-point search over r in the hyperplane orthogonal
    to v zeroes the transverse endpoint deviation; the surviving component
    along v gives s'.
    """
    opts = opts or RealizationOptions()
    v = np.asarray(v, dtype=float).ravel()
    m = sys.m
    if v.shape != (m,) or not v.any():
        raise ValueError("need a nonzero direction of the state dimension")
    if conic_membership(cone.cone, v) != "interior":
        raise ValueError("direction is not interior to the cone")
    rank = cone.cone.span_basis().shape[1]
    if rank < m:
        raise ValueError("realization needs a full-dimensional cone")
    if any(p.kind in ("init+", "init-") for p in cone.provenance):
        raise ValueError("initial-manifold generators are not realizable by "
                         "control perturbations alone")

    lam_star, tstar = positive_combination(cone.cone, v)
    if lam_star is None or tstar <= 0:
        raise ValueError("direction is not interior to the cone")
    W = cone.cone.matrix
    Wp = np.linalg.pinv(W)

    # orthonormal basis of the hyperplane orthogonal to v
    U, _, _ = np.linalg.svd(v.reshape(-1, 1), full_matrices=True)
    Q = U[:, 1:]
    Mmap = Wp @ Q  # coefficient response to transverse offsets

    margin = membership_margin(cone.cone, v)
    R = 0.5 * margin
    delta2 = R
    if Mmap.size:
        rows = np.linalg.norm(Mmap, axis=1)
        with np.errstate(divide="ignore"):
            bounds = np.where(rows > 0, lam_star / np.maximum(rows, 1e-300), np.inf)
        delta2 = min(delta2, 0.5 * float(np.min(bounds)))
    if not delta2 > 0:
        raise ValueError("degenerate interior margin")

    needle_ix = [i for i, p in enumerate(cone.provenance) if p.kind == "needle"]
    plus_ix = [i for i, p in enumerate(cone.provenance) if p.kind == "axis+"]
    minus_ix = [i for i, p in enumerate(cone.provenance) if p.kind == "axis-"]
    free_time = bool(plus_ix or minus_ix)

    x0 = traj.states[0]
    cfg = opts.cfg or IntegratorConfig()
    ref_end = simulate(sys, _clip_signal(traj.control, float(t)), x0, cfg).endpoint
    vv = float(v @ v)
    nq = Q.shape[1]
    if opts.boundary_samples is not None:
        bnd = opts.boundary_samples
    else:
        bnd = {0: 2, 1: 2, 2: 16}.get(nq, 8 * nq)

    def build(lam, s):
        needles = [NeedleData(t1=cone.provenance[i].needle.t1,
                              l1=lam[i] * cone.provenance[i].needle.l1,
                              u1=cone.provenance[i].needle.u1)
                   for i in needle_ix]
        sig = apply_needle_suite(traj.control, needles, s)
        dt = float(sum(lam[i] for i in plus_ix) - sum(lam[i] for i in minus_ix))
        eval_time = float(t) + s * dt if free_time else float(t)
        if eval_time <= sig.a:
            raise NeedleLayoutError("evaluation time collapsed to the start")
        return _clip_signal(sig, eval_time), eval_time

    def endpoint(lam, s):
        sig, eval_time = build(lam, s)
        return simulate(sys, sig, x0, cfg).endpoint, sig, eval_time

    best_res = np.inf
    s = opts.s0
    last_s = s
    for _ in range(opts.max_attempts):
        last_s = s

        def G(rho):
            lam = lam_star + Mmap @ rho if nq else lam_star
            d = endpoint(lam, s)[0] - ref_end
            dv = float(d @ v)
            if dv <= 0:
                raise _TransverseFailure()
            return Q.T @ ((vv / dv) * d - v)

        try:
            if nq == 0:
                rho = np.zeros(0)
            else:
                # residual along the ray is s' * |G|, so a G-space tolerance
                # of 0.3 tol keeps the final check satisfiable
                rho = covered_point_root(G, np.zeros(nq), delta2, np.zeros(nq),
                                         tol=0.3 * opts.tol,
                                         boundary_samples=bnd,
                                         max_iter=opts.root_max_iter)
            lam = lam_star + Mmap @ rho if nq else lam_star
            end, sig, eval_time = endpoint(lam, s)
            d = end - ref_end
            s_prime = float(d @ v) / vv
            if s_prime <= 0:
                raise _TransverseFailure()
            residual = float(np.linalg.norm(d - s_prime * v))
            best_res = min(best_res, residual)
            if residual > opts.tol * s:
                raise RootSearchError(rho, residual)
            return RealizationResult(s=s, s_prime=s_prime, control=sig,
                                     endpoint=end, eval_time=eval_time,
                                     residual=residual)
        except (BoundaryConditionError, _TransverseFailure, NeedleLayoutError):
            s *= 0.5
        except RootSearchError as e:
            r = float(getattr(e, "best_residual", np.inf))
            if np.isfinite(r):
                best_res = min(best_res, r)
            s *= 0.5
    raise RealizationError(best_res, last_s)
