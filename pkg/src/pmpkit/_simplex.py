"""Dense two-phase simplex for the small linear programs used by the cone routines.

Every LP in this package is tiny (n <= ~10 dimensions, at most a few hundred
columns), so a plain dense tableau with Bland's rule is adequate and keeps the
package free of solver dependencies.  The public entry points are
``solve_standard`` (equality standard form) and ``linprog_dense`` (a small
modeling layer with inequality rows and per-variable bounds).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-9

_MAX_ITER = 50000


@dataclass
class LpResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None = None
    value: float | None = None

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _pivot(T, basis, row, col):
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[row]
    basis[row] = col


def _iterate(T, basis, allowed, tol):
    """Simplex iterations on tableau T (last row = reduced costs, last col = rhs).

    `allowed` lists the columns that may enter, in increasing order (Bland's
    rule scans them in that order).  Returns "optimal" or "unbounded".
    """
    m = T.shape[0] - 1
    for _ in range(_MAX_ITER):
        enter = -1
        for j in allowed:
            if T[-1, j] < -tol:
                enter = j
                break
        if enter < 0:
            return "optimal"
        leave = -1
        best = 0.0
        for i in range(m):
            a = T[i, enter]
            if a > tol:
                r = T[i, -1] / a
                # ties resolved toward the smallest basis index (Bland)
                if leave < 0 or r < best - 1e-12 * (1.0 + abs(best)):
                    best = r
                    leave = i
                elif abs(r - best) <= 1e-12 * (1.0 + abs(best)) and basis[i] < basis[leave]:
                    leave = i
        if leave < 0:
            return "unbounded"
        _pivot(T, basis, leave, enter)
    raise RuntimeError("simplex iteration limit reached")


def solve_standard(c, A, b, tol=DEFAULT_TOL):
    """min c.x  subject to  A x = b, x >= 0."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float)).astype(float)
    c = np.atleast_1d(np.asarray(c, dtype=float)).astype(float)
    m, n = A.shape if A.size else (len(b), len(c))
    if n == 0:
        if np.all(np.abs(b) <= tol):
            return LpResult("optimal", np.zeros(0), 0.0)
        return LpResult("infeasible")
    if m == 0:
        if np.any(c < -tol):
            return LpResult("unbounded")
        return LpResult("optimal", np.zeros(n), 0.0)

    # phase 1: minimize the sum of artificial variables
    A1 = A.copy()
    b1 = b.copy()
    neg = b1 < 0
    A1[neg] *= -1.0
    b1[neg] *= -1.0
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A1
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b1
    T[-1, :n] = -A1.sum(axis=0)
    T[-1, -1] = -b1.sum()
    basis = list(range(n, n + m))
    status = _iterate(T, basis, range(n + m), tol)
    if status != "optimal":  # pragma: no cover - phase 1 is always bounded below
        raise RuntimeError("phase-1 simplex returned " + status)
    if -T[-1, -1] > tol * (1.0 + abs(b1).max()):
        return LpResult("infeasible")

    # drive remaining artificials out of the basis; drop redundant rows
    keep = []
    for i in range(m):
        if basis[i] >= n:
            piv = -1
            for j in range(n):
                if abs(T[i, j]) > tol:
                    piv = j
                    break
            if piv >= 0:
                _pivot(T, basis, i, piv)
                keep.append(i)
            # else: redundant constraint row, dropped below
        else:
            keep.append(i)
    if len(keep) < m:
        T = np.vstack([T[keep], T[-1:]])
        basis = [basis[i] for i in keep]
        m = len(keep)

    # phase 2 with the real objective; artificial columns may not re-enter
    T[-1, :] = 0.0
    T[-1, :n] = c
    for i in range(m):
        if T[-1, basis[i]] != 0.0:
            T[-1] -= T[-1, basis[i]] * T[i]
    status = _iterate(T, basis, range(n), tol)
    if status == "unbounded":
        return LpResult("unbounded")
    x = np.zeros(n)
    for i in range(m):
        if basis[i] < n:
            x[basis[i]] = T[i, -1]
    x[x < 0] = np.where(x[x < 0] > -10 * tol, 0.0, x[x < 0])
    return LpResult("optimal", x, float(c @ x))


def linprog_dense(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None, tol=DEFAULT_TOL):
    """min c.x with A_ub x <= b_ub, A_eq x = b_eq and per-variable (lo, hi) bounds.

    `bounds` is a sequence of (lo, hi) pairs; None in either slot means
    unbounded on that side.  Default bound is (0, None), matching the usual
    linprog convention.
    """
    c = np.atleast_1d(np.asarray(c, dtype=float)).astype(float)
    nvar = len(c)
    if bounds is None:
        bounds = [(0.0, None)] * nvar
    if len(bounds) != nvar:
        raise ValueError("bounds length mismatch")

    lo = np.array([(-np.inf if b_[0] is None else float(b_[0])) for b_ in bounds])
    hi = np.array([(np.inf if b_[1] is None else float(b_[1])) for b_ in bounds])
    if np.any(lo > hi):
        return LpResult("infeasible")

    # substitution x = offset + S y with y >= 0 in standard form
    offset = np.zeros(nvar)
    cols = []          # (var index, sign) per standard-form column
    extra_ub = []      # (column index, ub value) for two-sided bounds
    for j in range(nvar):
        if np.isfinite(lo[j]):
            offset[j] = lo[j]
            cols.append((j, 1.0))
            if np.isfinite(hi[j]):
                extra_ub.append((len(cols) - 1, hi[j] - lo[j]))
        elif np.isfinite(hi[j]):
            offset[j] = hi[j]
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    ny = len(cols)
    S = np.zeros((nvar, ny))
    for idx, (j, sgn) in enumerate(cols):
        S[j, idx] = sgn

    rows = []
    rhs = []
    if A_eq is not None and len(np.atleast_2d(A_eq)):
        A_eq = np.atleast_2d(np.asarray(A_eq, dtype=float))
        b_eq = np.atleast_1d(np.asarray(b_eq, dtype=float))
        for i in range(A_eq.shape[0]):
            rows.append((A_eq[i] @ S, None))
            rhs.append(b_eq[i] - A_eq[i] @ offset)
    if A_ub is not None and len(np.atleast_2d(A_ub)):
        A_ub = np.atleast_2d(np.asarray(A_ub, dtype=float))
        b_ub = np.atleast_1d(np.asarray(b_ub, dtype=float))
        for i in range(A_ub.shape[0]):
            rows.append((A_ub[i] @ S, "slack"))
            rhs.append(b_ub[i] - A_ub[i] @ offset)
    for col_idx, ubval in extra_ub:
        r = np.zeros(ny)
        r[col_idx] = 1.0
        rows.append((r, "slack"))
        rhs.append(ubval)

    nslack = sum(1 for _, kind in rows if kind == "slack")
    A_std = np.zeros((len(rows), ny + nslack))
    b_std = np.array(rhs, dtype=float)
    si = 0
    for i, (r, kind) in enumerate(rows):
        A_std[i, :ny] = r
        if kind == "slack":
            A_std[i, ny + si] = 1.0
            si += 1
    c_std = np.concatenate([c @ S, np.zeros(nslack)])

    res = solve_standard(c_std, A_std, b_std, tol=tol)
    if not res.ok:
        return res
    x = offset + S @ res.x[:ny]
    return LpResult("optimal", x, float(c @ x))
