"""Control systems, piecewise-constant control signals, and trajectory simulation.

A control system is a parameterized vector field f(x, u) with an optional
running-cost rate F(x, u).  Controls are represented exclusively as
piecewise-constant signals: every perturbation this library constructs is
itself a piecewise-constant edit, so the machinery built on top is exactly
representable in this class.  The extended system prepends a cost coordinate
x0' = F(x, u) to the state, so minimizing total cost becomes a question about
the final value of one coordinate.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .flows import FlowBlowUpError, IntegratorConfig, integration_grid

_FD_H = 1e-6


def _fd_jacobian(g: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = _FD_H * (1.0 + float(np.linalg.norm(x)))
    cols = []
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h
        cols.append((np.asarray(g(x + e), dtype=float) - np.asarray(g(x - e), dtype=float)) / (2.0 * h))
    return np.column_stack(cols)


@dataclass(frozen=True)
class ControlSet:
    """Admissible control values: a box, a finite list, or a closed ball."""

    kind: str
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    points: Optional[Tuple[np.ndarray, ...]] = None
    center: Optional[np.ndarray] = None
    radius: Optional[float] = None

    def __post_init__(self):
        if self.kind == "box":
            lo = np.asarray(self.lo, dtype=float).ravel()
            hi = np.asarray(self.hi, dtype=float).ravel()
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ValueError("box bounds need lo <= hi componentwise")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)
        elif self.kind == "finite":
            if not self.points:
                raise ValueError("finite control set needs at least one point")
            pts = tuple(np.asarray(p, dtype=float).ravel() for p in self.points)
            if len({p.size for p in pts}) != 1:
                raise ValueError("finite control points must share a dimension")
            object.__setattr__(self, "points", pts)
        elif self.kind == "ball":
            c = np.asarray(self.center, dtype=float).ravel()
            if self.radius is None or self.radius < 0:
                raise ValueError("ball needs a nonnegative radius")
            object.__setattr__(self, "center", c)
        else:
            raise ValueError(f"unknown control set kind {self.kind!r}")

    @property
    def dim(self) -> int:
        if self.kind == "box":
            return self.lo.size
        if self.kind == "finite":
            return self.points[0].size
        return self.center.size

    def contains(self, u: np.ndarray, tol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float).ravel()
        if u.size != self.dim:
            return False
        if self.kind == "box":
            return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))
        if self.kind == "finite":
            return any(np.max(np.abs(u - p)) <= tol for p in self.points)
        return float(np.linalg.norm(u - self.center)) <= self.radius + tol


def box(lo, hi) -> ControlSet:
    return ControlSet(kind="box", lo=lo, hi=hi)


def finite(points) -> ControlSet:
    return ControlSet(kind="finite", points=tuple(points))


def ball(center, radius) -> ControlSet:
    return ControlSet(kind="ball", center=center, radius=float(radius))


@dataclass
class ControlSystem:
    """Dynamics f(x, u), cost rate F(x, u), and the admissible control set.

    `df_dx` and `dF_dx` may be omitted; central finite differences stand in.
    `extended` marks a system produced by `extend` so it cannot be extended
    twice.
    """

    m: int
    k: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    control_set: ControlSet
    F: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
    df_dx: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    dF_dx: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    extended: bool = False

    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.f(np.asarray(x, dtype=float), u), dtype=float).ravel()

    def cost_rate(self, x: np.ndarray, u: np.ndarray) -> float:
        if self.F is None:
            return 0.0
        return float(self.F(np.asarray(x, dtype=float), u))

    def jac_x(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.df_dx is not None:
            return np.asarray(self.df_dx(np.asarray(x, dtype=float), u), dtype=float).reshape(self.m, self.m)
        return _fd_jacobian(lambda y: self.dynamics(y, u), x)

    def cost_grad_x(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.F is None:
            return np.zeros(self.m)
        if self.dF_dx is not None:
            return np.asarray(self.dF_dx(np.asarray(x, dtype=float), u), dtype=float).ravel()
        x = np.asarray(x, dtype=float)
        h = _FD_H * (1.0 + float(np.linalg.norm(x)))
        g = np.zeros(self.m)
        for j in range(self.m):
            e = np.zeros(self.m)
            e[j] = h
            g[j] = (self.cost_rate(x + e, u) - self.cost_rate(x - e, u)) / (2.0 * h)
        return g


def extend(sys: ControlSystem) -> ControlSystem:
    """Prepend the running-cost coordinate: state (x0, x), dynamics (F, f).

    The Jacobian of the extended dynamics has a zero column for x0, so the
    adjoint coordinate paired with x0 is constant along any adjoint flow.
    """
    if sys.extended:
        raise ValueError("system is already extended")

    def f_hat(xh, u):
        x = xh[1:]
        return np.concatenate(([sys.cost_rate(x, u)], sys.dynamics(x, u)))

    def df_hat(xh, u):
        x = xh[1:]
        J = np.zeros((sys.m + 1, sys.m + 1))
        J[0, 1:] = sys.cost_grad_x(x, u)
        J[1:, 1:] = sys.jac_x(x, u)
        return J

    return ControlSystem(m=sys.m + 1, k=sys.k, f=f_hat, control_set=sys.control_set,
                         F=None, df_dx=df_hat, extended=True)


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant control: values[i] on [switch_times[i-1], switch_times[i]).

    Right-continuous at switches; the final value extends to b.
    """

    a: float
    b: float
    switch_times: Tuple[float, ...]
    values: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError("need b > a")
        st = tuple(float(t) for t in self.switch_times)
        if any(t2 <= t1 for t1, t2 in zip(st, st[1:])):
            raise ValueError("switch times must be strictly increasing")
        if st and (st[0] <= self.a or st[-1] >= self.b):
            raise ValueError("switch times must lie strictly inside (a, b)")
        vals = tuple(np.asarray(v, dtype=float).ravel() for v in self.values)
        if len(vals) != len(st) + 1:
            raise ValueError("need exactly one value per piece")
        object.__setattr__(self, "switch_times", st)
        object.__setattr__(self, "values", vals)

    def value_at(self, t: float) -> np.ndarray:
        return self.values[bisect.bisect_right(self.switch_times, t)]


def constant_signal(a: float, b: float, value) -> ControlSignal:
    return ControlSignal(a=a, b=b, switch_times=(), values=(np.asarray(value, dtype=float),))


@dataclass
class Trajectory:
    """States on a dense time grid, with node velocities for interpolation."""

    grid: np.ndarray
    states: np.ndarray
    control: ControlSignal
    velocities: np.ndarray
    system: ControlSystem = field(repr=False, default=None)

    @property
    def a(self) -> float:
        return float(self.grid[0])

    @property
    def b(self) -> float:
        return float(self.grid[-1])

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1].copy()

    def _segment(self, t: float) -> int:
        i = int(np.searchsorted(self.grid, t, side="right")) - 1
        return min(max(i, 0), len(self.grid) - 2)

    def state_at(self, t: float) -> np.ndarray:
        """Cubic Hermite interpolation on the containing grid segment.

        End velocities are evaluated with the segment's own control value, so
        interpolation stays one-sided at switch nodes.
        """
        t = float(t)
        if t <= self.grid[0]:
            return self.states[0].copy()
        if t >= self.grid[-1]:
            return self.states[-1].copy()
        i = self._segment(t)
        t0, t1 = float(self.grid[i]), float(self.grid[i + 1])
        h = t1 - t0
        uval = self.control.value_at(0.5 * (t0 + t1))
        x0, x1 = self.states[i], self.states[i + 1]
        v0 = self.system.dynamics(x0, uval) if self.system is not None else self.velocities[i]
        v1 = self.system.dynamics(x1, uval) if self.system is not None else self.velocities[i + 1]
        s = (t - t0) / h
        h00 = (1.0 + 2.0 * s) * (1.0 - s) ** 2
        h10 = s * (1.0 - s) ** 2
        h01 = s * s * (3.0 - 2.0 * s)
        h11 = s * s * (s - 1.0)
        return h00 * x0 + h * h10 * v0 + h01 * x1 + h * h11 * v1

    def to_csv(self, path) -> None:
        m = self.states.shape[1]
        header = "t," + ",".join(f"x{j}" for j in range(m))
        _write_csv(path, header, self.grid, self.states)


@dataclass
class ExtendedTrajectory(Trajectory):
    """Trajectory of the extended system; states[:, 0] is the running cost."""

    @property
    def running_cost(self) -> np.ndarray:
        return self.states[:, 0].copy()

    def project(self) -> Trajectory:
        """Drop the cost coordinate; shares the grid and control."""
        return Trajectory(grid=self.grid.copy(), states=self.states[:, 1:].copy(),
                          control=self.control, velocities=self.velocities[:, 1:].copy(),
                          system=None)

    def to_csv(self, path) -> None:
        m = self.states.shape[1] - 1
        header = "t," + ",".join(f"x{j}" for j in range(m)) + ",xcost"
        data = np.column_stack([self.states[:, 1:], self.states[:, 0]])
        _write_csv(path, header, self.grid, data)


def _write_csv(path, header: str, grid: np.ndarray, data: np.ndarray) -> None:
    lines = [header]
    for t, row in zip(grid, data):
        lines.append(",".join(f"{v:.17g}" for v in np.concatenate(([t], row))))
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def simulate(sys: ControlSystem, u: ControlSignal, x0,
             cfg: Optional[IntegratorConfig] = None) -> Trajectory:
    """Integrate x' = f(x, u(t)) on [a, b] with the grid hitting every switch.

    Fixed-step RK4 per grid segment with the segment's constant control value;
    since the control is constant on each segment, no control discontinuity
    falls inside a step.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != sys.m or not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite with the system dimension")
    for v in u.values:
        if not sys.control_set.contains(v):
            raise ValueError("control signal value outside the control set")
    cfg = cfg or IntegratorConfig()
    merged = IntegratorConfig(step=cfg.step, method=cfg.method,
                              event_times=tuple(cfg.event_times) + tuple(u.switch_times))
    grid = integration_grid(u.a, u.b, merged)
    n = len(grid)
    states = np.empty((n, sys.m))
    vels = np.empty((n, sys.m))
    states[0] = x0
    x = x0
    uval = u.values[0]
    for i in range(n - 1):
        t0, t1 = float(grid[i]), float(grid[i + 1])
        h = t1 - t0
        uval = u.value_at(0.5 * (t0 + t1))
        k1 = sys.dynamics(x, uval)
        vels[i] = k1
        k2 = sys.dynamics(x + 0.5 * h * k1, uval)
        k3 = sys.dynamics(x + 0.5 * h * k2, uval)
        k4 = sys.dynamics(x + h * k3, uval)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FlowBlowUpError(t1)
        states[i + 1] = x
    vels[n - 1] = sys.dynamics(x, uval)
    cls = ExtendedTrajectory if sys.extended else Trajectory
    return cls(grid=grid, states=states, control=u, velocities=vels, system=sys)


def cost(ext_traj: ExtendedTrajectory) -> float:
    """Total running cost: the final value of the cost coordinate."""
    return float(ext_traj.states[-1, 0])


def lebesgue_times(u: ControlSignal, candidates: Sequence[float]) -> List[float]:
    """Interior candidate times that avoid the switch set.

    For a piecewise-constant control every interior non-switch time is a
    Lebesgue time: the control is constant near it, so the needle-variation
    expansion holds with the plain integrand value.
    """
    out = []
    for t in candidates:
        t = float(t)
        if not (u.a < t < u.b):
            continue
        if any(abs(t - s) <= 1e-12 * (1.0 + abs(s)) for s in u.switch_times):
            continue
        out.append(t)
    return out
