"""Time-dependent vector fields and their evolution operators.

Integration is fixed-step RK4 on a grid refined to hit every event time
exactly (control switches, needle boundaries); backward integration is the
same scheme with negative steps.  The complete (tangent) lift transports
tangent vectors by v' = (dX/dx) v, the cotangent lift transports covectors by
p' = -(dX/dx)^T p, and their pairing <p, v> is an invariant of the transport,
which pairing_drift measures.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class FlowBlowUpError(RuntimeError):
    """Non-finite state encountered during integration."""

    def __init__(self, t):
        super().__init__("non-finite state at t=%r (blow-up)" % (t,))
        self.t = t


class SingularTransportError(RuntimeError):
    """Transported differential too ill-conditioned to invert."""

    def __init__(self, cond):
        super().__init__("transported Jacobian condition estimate %.3e" % cond)
        self.cond = cond


@dataclass
class TimeVectorField:
    """Field X(t, x) on R^dim with an optional analytic state Jacobian.

    When `jacobian` is None, central finite differences with step
    1e-6 (1 + |x|) are used.
    """

    dim: int
    eval: Callable
    jacobian: Callable | None = None

    def jac(self, t, x):
        if self.jacobian is not None:
            return np.asarray(self.jacobian(t, x), dtype=float)
        h = 1e-6 * (1.0 + float(np.linalg.norm(x)))
        J = np.empty((self.dim, self.dim))
        for j in range(self.dim):
            xp = np.array(x, dtype=float)
            xm = np.array(x, dtype=float)
            xp[j] += h
            xm[j] -= h
            J[:, j] = (np.asarray(self.eval(t, xp)) - np.asarray(self.eval(t, xm))) / (2.0 * h)
        return J


@dataclass
class IntegratorConfig:
    """Fixed-step RK4 configuration.

    step None means 1e-3 times the integration span.  event_times are hit
    exactly by the grid.
    """

    step: float | None = None
    method: str = "rk4"
    event_times: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.method != "rk4":
            raise ValueError("only the fixed-step rk4 method is supported")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive")
        self.event_times = tuple(float(t) for t in self.event_times)


@dataclass
class TangentState:
    x: np.ndarray
    v: np.ndarray


@dataclass
class CotangentState:
    x: np.ndarray
    p: np.ndarray


def integration_grid(s, t, cfg=None):
    """Monotone grid from s to t, uniform at the base step but hitting every
    event time exactly.  Base nodes closer than 1e-9 of the span to an event
    are replaced by the event node."""
    cfg = cfg or IntegratorConfig()
    s = float(s)
    t = float(t)
    if t == s:
        return np.array([s])
    lo, hi = (s, t) if t > s else (t, s)
    span = hi - lo
    step = cfg.step if cfg.step is not None else 1e-3 * span
    n = max(1, math.ceil(span / step - 1e-12))
    base = list(np.linspace(lo, hi, n + 1))
    events = sorted(e for e in cfg.event_times if lo < e < hi)
    if events:
        merged = [lo]
        for b in base[1:-1]:
            if all(abs(b - e) > 1e-9 * span for e in events):
                merged.append(b)
        merged.extend(events)
        merged.append(hi)
        base = sorted(merged)
    grid = np.array(base)
    if t < s:
        grid = grid[::-1]
    return grid


def _rk4_path(f, grid, x0):
    """RK4 states along a (possibly descending) grid; raises on blow-up."""
    x = np.array(x0, dtype=float)
    out = np.empty((len(grid), len(x)))
    out[0] = x
    for i in range(len(grid) - 1):
        t0 = grid[i]
        h = grid[i + 1] - t0
        k1 = np.asarray(f(t0, x))
        k2 = np.asarray(f(t0 + 0.5 * h, x + 0.5 * h * k1))
        k3 = np.asarray(f(t0 + 0.5 * h, x + 0.5 * h * k2))
        k4 = np.asarray(f(t0 + h, x + h * k3))
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FlowBlowUpError(grid[i + 1])
        out[i + 1] = x
    return out


def flow(X, t, s, x0, cfg=None):
    """Endpoint of the evolution operator from (s, x0) to time t."""
    grid = integration_grid(s, t, cfg)
    return _rk4_path(X.eval, grid, x0)[-1]


def _tangent_rhs(X):
    m = X.dim

    def f(t, y):
        x, v = y[:m], y[m:]
        return np.concatenate([np.asarray(X.eval(t, x)), X.jac(t, x) @ v])

    return f


def _cotangent_rhs(X):
    m = X.dim

    def f(t, y):
        x, p = y[:m], y[m:]
        return np.concatenate([np.asarray(X.eval(t, x)), -X.jac(t, x).T @ p])

    return f


def tangent_lift_flow(X, t, s, init, cfg=None):
    """Transport (x, v) by the complete lift: x' = X, v' = (dX/dx) v."""
    grid = integration_grid(s, t, cfg)
    y = _rk4_path(_tangent_rhs(X), grid, np.concatenate([init.x, init.v]))[-1]
    return TangentState(y[:X.dim], y[X.dim:])


def cotangent_lift_flow(X, t, s, init, cfg=None):
    """Transport (x, p) by the cotangent lift: x' = X, p' = -(dX/dx)^T p."""
    grid = integration_grid(s, t, cfg)
    y = _rk4_path(_cotangent_rhs(X), grid, np.concatenate([init.x, init.p]))[-1]
    return CotangentState(y[:X.dim], y[X.dim:])


def pairing_drift(X, interval, x0, v0, p0, cfg=None):
    """Max over the grid of |<p(t), v(t)> - <p0, v0>| for both lifts run
    along the same base trajectory."""
    a, b = interval
    m = X.dim

    def f(t, y):
        x, v, p = y[:m], y[m:2 * m], y[2 * m:]
        J = X.jac(t, x)
        return np.concatenate([np.asarray(X.eval(t, x)), J @ v, -J.T @ p])

    grid = integration_grid(a, b, cfg)
    path = _rk4_path(f, grid, np.concatenate([x0, v0, p0]))
    ref = float(np.dot(p0, v0))
    pairings = np.einsum("ij,ij->i", path[:, 2 * m:], path[:, m:2 * m])
    return float(np.max(np.abs(pairings - ref)))


def _transport_matrix(X, t, s, x, cfg=None):
    """Differential of the flow map at x, T_x Phi_(t,s), as an m x m matrix,
    together with the transported base point."""
    m = X.dim

    def f(tt, y):
        xx = y[:m]
        M = y[m:].reshape(m, m)
        J = X.jac(tt, xx)
        return np.concatenate([np.asarray(X.eval(tt, xx)), (J @ M).ravel()])

    grid = integration_grid(s, t, cfg)
    y = _rk4_path(f, grid, np.concatenate([np.asarray(x, float), np.eye(m).ravel()]))[-1]
    return y[:m], y[m:].reshape(m, m)


def pullback_field(X, Y, s, cfg=None):
    """Field Z with Z(t, x) = (T Phi^X_(t,s))^{-1} Y(t, Phi^X_(t,s)(x)).

    The transported differential is inverted by a dense solve; condition
    estimates above 1e12 raise SingularTransportError.
    """
    if X.dim != Y.dim:
        raise ValueError("dimension mismatch")

    def zeval(t, x):
        base, M = _transport_matrix(X, t, s, x, cfg)
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularTransportError(cond)
        return np.linalg.solve(M, np.asarray(Y.eval(t, base), dtype=float))

    return TimeVectorField(dim=X.dim, eval=zeval)


def flow_decomposition_residual(X, Y, t, s, x0, cfg=None):
    """Norm of Phi^{X+Y}(t,s,x0) - Phi^X(t,s, Phi^Z(t,s,x0)) with Z the
    pulled-back difference field."""
    XY = TimeVectorField(
        dim=X.dim,
        eval=lambda tt, xx: np.asarray(X.eval(tt, xx)) + np.asarray(Y.eval(tt, xx)),
        jacobian=(None if (X.jacobian is None or Y.jacobian is None)
                  else lambda tt, xx: np.asarray(X.jacobian(tt, xx)) + np.asarray(Y.jacobian(tt, xx))),
    )
    direct = flow(XY, t, s, x0, cfg)
    Z = pullback_field(X, Y, s, cfg)
    composed = flow(X, t, s, flow(Z, t, s, x0, cfg), cfg)
    return float(np.linalg.norm(direct - composed))
