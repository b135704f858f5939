"""Centralized reference solvers used to check the distributed algorithms.

* :func:`simplex_max` -- a dense two-phase tableau simplex with Bland's
  anti-cycling rule; :func:`solve_lp_centralized` applies it to all-linear
  instances and returns dual prices alongside the plan.
* :func:`grid_search_oracle` -- brute-force enumeration over the free
  coordinates left after eliminating equality constraints, for tiny
  instances with any utility family.
* :func:`solve_convex` -- a conic formulation handed to cvxpy, for general
  instances too large for the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import OracleError
from .model import (KIND_LOG, KIND_THRESHOLD, LinearEqualityInstance, ProblemInstance, check_balance,
                    require_valid)

PIVOT_TOL = 1e-11


@dataclass(frozen=True)
class OracleResult:
    """Optimal value and one optimal plan (canonical edge order).

    ``u``/``v`` are dual prices (LP path only), ``resolution`` and
    ``error_bound`` are set by the grid path.
    """

    value: float
    plan: np.ndarray
    method: str
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    dual_value: float | None = None
    resolution: float | None = None
    error_bound: float | None = None

    def plan_dict(self, inst: ProblemInstance) -> dict:
        return inst.plan_dict(self.plan)


# --------------------------------------------------------------------- simplex


@dataclass(frozen=True)
class LPSolution:
    x: np.ndarray
    value: float
    y_eq: np.ndarray
    y_ub: np.ndarray
    basis: tuple[int, ...]
    pivots: int


def _pivot(T: np.ndarray, row: int, col: int):
    T[row] /= T[row, col]
    others = np.flatnonzero(T[:, col])
    for i in others:
        if i != row:
            T[i] -= T[i, col] * T[row]


def _run_phase(T, basis, cost, allowed, max_pivots):
    pivots = 0
    while True:
        reduced = cost - cost[basis] @ T[:, :-1]
        candidates = np.flatnonzero((reduced > PIVOT_TOL) & allowed)
        if candidates.size == 0:
            return pivots
        col = candidates[0]
        column = T[:, col]
        rows = np.flatnonzero(column > PIVOT_TOL)
        if rows.size == 0:
            raise OracleError("linear program is unbounded")
        ratios = T[rows, -1] / column[rows]
        best = ratios.min()
        tied = rows[ratios <= best + PIVOT_TOL * max(1.0, abs(best))]
        row = tied[np.argmin(np.asarray(basis)[tied])]
        _pivot(T, row, col)
        basis[row] = col
        pivots += 1
        if pivots > max_pivots:
            raise OracleError(f"simplex exceeded {max_pivots} pivots")


def simplex_max(c, A_eq=None, b_eq=None, A_ub=None, b_ub=None, max_pivots: int = 100000) -> LPSolution:
    """Maximize ``c @ x`` subject to ``A_eq x = b_eq``, ``A_ub x <= b_ub``, ``x >= 0``.

    Dual prices satisfy ``A_eq.T y_eq + A_ub.T y_ub >= c`` with ``y_ub >= 0``.
    The final basis is refactorized so ``x`` and the duals carry no
    accumulated tableau error.
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float).reshape(-1, n)
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=float).reshape(-1, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
    m_eq, m_ub = A_eq.shape[0], A_ub.shape[0]
    m = m_eq + m_ub

    # standard form: [A_eq 0; A_ub I] [x; s] = b, rows flipped so b >= 0
    A = np.zeros((m, n + m_ub))
    A[:m_eq, :n] = A_eq
    A[m_eq:, :n] = A_ub
    A[m_eq:, n:] = np.eye(m_ub)
    b = np.concatenate([b_eq, b_ub])
    sign = np.where(b < 0, -1.0, 1.0)
    A *= sign[:, None]
    b = b * sign
    n_std = A.shape[1]

    T = np.hstack([A, np.eye(m), b[:, None]])
    basis = list(range(n_std, n_std + m))
    phase1_cost = np.concatenate([np.zeros(n_std), -np.ones(m)])
    allowed = np.ones(n_std + m, dtype=bool)
    pivots = _run_phase(T, basis, phase1_cost, allowed, max_pivots)
    infeasibility = float(np.sum(T[:, -1][np.asarray(basis) >= n_std]))
    if infeasibility > 1e-9 * max(1.0, float(np.abs(b).max(initial=0.0))):
        raise OracleError(f"linear program is infeasible (phase-one residual {infeasibility:.3g})")

    # drive zero-level artificials out of the basis, dropping redundant rows
    keep = np.ones(m, dtype=bool)
    for i in range(m):
        if basis[i] >= n_std:
            cols = np.flatnonzero(np.abs(T[i, :n_std]) > PIVOT_TOL)
            if cols.size:
                _pivot(T, i, cols[0])
                basis[i] = cols[0]
                pivots += 1
            else:
                keep[i] = False
    T = T[keep]
    basis = [basis[i] for i in range(m) if keep[i]]
    allowed[n_std:] = False
    phase2_cost = np.concatenate([c, np.zeros(m_ub + m)])
    pivots += _run_phase(T, basis, phase2_cost, allowed, max_pivots)

    B = A[keep][:, basis]
    x_std = np.zeros(n_std)
    y_kept = np.zeros(0)
    if basis:
        x_std[basis] = np.linalg.solve(B, b[keep])
        y_kept = np.linalg.solve(B.T, phase2_cost[basis])
    x_std = np.maximum(x_std, 0.0)
    y = np.zeros(m)
    y[keep] = y_kept
    y *= sign
    x = x_std[:n]
    return LPSolution(x, float(c @ x), y[:m_eq], y[m_eq:], tuple(basis), pivots)


def _agent_rows(inst: ProblemInstance):
    """Constraint rows for the agent bounds: (A_eq, b_eq, A_ub, b_ub)."""
    lay = inst.layout
    eq_rows, eq_b, ub_rows, ub_b = [], [], [], []
    groups = [(lay.edge_target, inst.targets), (lay.edge_source, inst.sources)]
    for owner, agents in groups:
        for i, agent in enumerate(agents):
            row = (owner == i).astype(float)
            if agent.lower == agent.upper:
                eq_rows.append(row)
                eq_b.append(agent.lower)
                continue
            if np.isfinite(agent.upper):
                ub_rows.append(row)
                ub_b.append(agent.upper)
            if agent.lower > 0:
                ub_rows.append(-row)
                ub_b.append(-agent.lower)
    n = inst.n_edges
    return (np.array(eq_rows).reshape(-1, n), np.array(eq_b), np.array(ub_rows).reshape(-1, n), np.array(ub_b))


def solve_lp_centralized(inst) -> OracleResult:
    """Exact optimum of an all-linear instance by the simplex method.

    Accepts a :class:`LinearEqualityInstance` (returns target prices ``u``
    and source prices ``v`` with ``u_i + v_j >= gamma_ij + delta_ij``) or an
    all-linear :class:`ProblemInstance` with arbitrary bounds.
    """
    if isinstance(inst, LinearEqualityInstance):
        n, m = inst.shape
        A_eq = np.vstack([np.kron(np.eye(n), np.ones((1, m))), np.kron(np.ones((1, n)), np.eye(m))])
        sol = simplex_max(inst.surplus.ravel(), A_eq, np.concatenate([inst.p, inst.q]))
        u, v = sol.y_eq[:n], sol.y_eq[n:]
        return OracleResult(inst.primal_value(sol.x), sol.x, "simplex", u, v, inst.dual_value(u, v))
    require_valid(inst)
    if not inst.is_all_linear():
        raise OracleError("the LP oracle needs linear utilities on every edge; use grid_search_oracle or solve_convex")
    if inst.is_equality_form() and not check_balance(inst):
        raise OracleError("equality-form instance is unbalanced, so it has no feasible plan")
    A_eq, b_eq, A_ub, b_ub = _agent_rows(inst)
    c = inst.f_table.slope + inst.g_table.slope
    sol = simplex_max(c, A_eq, b_eq, A_ub, b_ub)
    return OracleResult(inst.objective(sol.x), sol.x, "simplex")


def northwest_corner(p, q) -> np.ndarray:
    """Feasible plan of a balanced transportation problem by the northwest-corner rule."""
    p, q = np.array(p, dtype=float), np.array(q, dtype=float)
    plan = np.zeros((p.size, q.size))
    i = j = 0
    while i < p.size and j < q.size:
        amount = min(p[i], q[j])
        plan[i, j] = amount
        p[i] -= amount
        q[j] -= amount
        if p[i] <= q[j]:
            i += 1
        else:
            j += 1
    return plan


# ------------------------------------------------------------------------ grid


@dataclass(frozen=True)
class GridResult:
    point: np.ndarray
    value: float
    resolution: float
    error_bound: float
    evaluated: int


def _eliminate(A_eq, b_eq, n):
    """Split coordinates into basic ones (solved from the equalities) and free ones."""
    if A_eq.shape[0] == 0:
        return np.zeros(0, dtype=int), np.arange(n), np.zeros((0, n)), np.zeros(0), np.zeros((0, n))
    _, r_rows, rows = scipy.linalg.qr(A_eq.T, pivoting=True)
    rank = int(np.sum(np.abs(np.diag(r_rows)) > 1e-10 * max(1.0, abs(r_rows[0, 0]))))
    A = A_eq[np.sort(rows[:rank])]
    b = b_eq[np.sort(rows[:rank])]
    _, r_cols, cols = scipy.linalg.qr(A, pivoting=True)
    basic = np.sort(cols[:rank])
    free = np.setdiff1d(np.arange(n), basic)
    B_inv = np.linalg.inv(A[:, basic])
    # x_basic = offset - coupling @ x_free
    return basic, free, B_inv @ A[:, free], B_inv @ b, A


def grid_maximize(fn, n: int, resolution: float, A_eq=None, b_eq=None, A_ub=None, b_ub=None,
                  upper=None, lipschitz=None, max_points: int = 200_000, max_free: int = 4, max_windows: int = 5000,
                  feas_tol: float = 1e-12) -> GridResult:
    """Maximize ``fn`` over ``{x >= 0, A_eq x = b_eq, A_ub x <= b_ub}`` by enumeration.

    ``fn`` maps an ``(N, n)`` array of points to ``N`` values.  Free
    coordinates are boxed in ``[0, upper]`` (inferred from nonnegative
    constraint rows when omitted).  When the full grid at ``resolution``
    exceeds ``max_points``, a coarse grid is refined around its best point
    until the step reaches ``resolution``; the window doubles whenever its
    best point lies on an inner edge, so refinement can travel along
    faces of the feasible set.  ``lipschitz`` (per coordinate)
    turns into the reported ``error_bound``.
    """
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float).reshape(-1, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=float).reshape(-1, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
    basic, free, coupling, offset, _ = _eliminate(A_eq, b_eq, n)
    if free.size > max_free:
        raise OracleError(f"grid search supports at most {max_free} free dimensions, instance has {free.size}")

    if upper is None:
        upper = np.full(n, np.inf)
        for A, b in ((A_eq, b_eq), (A_ub, b_ub)):
            for row, rhs in zip(A, b):
                if np.all(row >= 0):
                    pos = row > 0
                    upper[pos] = np.minimum(upper[pos], rhs / row[pos])
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (n,))
    box = upper[free]
    if np.any(~np.isfinite(box)):
        raise OracleError("a free coordinate has no finite upper bound; pass `upper`")
    if np.any(box < 0):
        raise OracleError("empty feasible set: a coordinate bound is negative")

    def expand(z):
        x = np.empty((z.shape[0], n))
        x[:, free] = z
        x[:, basic] = offset - z @ coupling.T
        return x

    def feasible(x):
        ok = np.all(x >= -feas_tol, axis=1)
        if A_ub.shape[0]:
            ok &= np.all(x @ A_ub.T <= b_ub + feas_tol * np.maximum(1.0, np.abs(b_ub)), axis=1)
        return ok

    def best_on(axes):
        best_val, best_pt, count = -np.inf, None, 0
        sizes = [a.size for a in axes]
        # chunk along the first axis to bound memory
        per_slice = int(np.prod(sizes[1:], dtype=np.int64)) if len(sizes) > 1 else 1
        chunk = max(1, 500_000 // max(per_slice, 1))
        for start in range(0, sizes[0] if sizes else 1, chunk):
            if axes:
                sub = [axes[0][start:start + chunk], *axes[1:]]
                z = np.stack(np.meshgrid(*sub, indexing="ij"), axis=-1).reshape(-1, len(axes))
            else:
                z = np.zeros((1, 0))
            x = expand(z)
            ok = feasible(x)
            count += z.shape[0]
            if not np.any(ok):
                continue
            x = np.maximum(x[ok], 0.0)
            vals = fn(x)
            i = int(np.argmax(vals))
            if vals[i] > best_val:
                best_val, best_pt = float(vals[i]), x[i]
        return best_val, best_pt, count

    def axis(lo, hi, step):
        k = int(np.floor((hi - lo) / step + 1e-9))
        pts = lo + step * np.arange(k + 1)
        if hi - pts[-1] > 1e-12 * max(1.0, hi):
            pts = np.append(pts, hi)
        return pts

    d = free.size
    full = np.prod([np.floor(b / resolution) + 2 for b in box]) if d else 1
    evaluated = 0
    if full <= max_points:
        value, point, evaluated = best_on([axis(0.0, b, resolution) for b in box])
    else:
        # pattern search on nested grids: move to a strictly better window
        # optimum (doubling the window if it sits on an inner edge), shrink
        # the window when the current point is already the best in it
        per_dim = 2 * max(4, (int(max_points ** (1.0 / d)) - 1) // 2)
        center, half = box / 2, box / 2
        value, point = -np.inf, None
        for _ in range(max_windows):
            step = np.maximum(2 * half / per_dim, resolution)
            lo, hi = np.maximum(center - half, 0.0), np.minimum(center + half, box)
            w_value, w_point, count = best_on([axis(lo[i], hi[i], step[i]) for i in range(d)])
            evaluated += count
            if w_point is not None and w_value > value:
                value, point = w_value, w_point
                z = w_point[free]
                stuck = ((z <= lo + 1e-12) & (lo > 0)) | ((z >= hi - 1e-12) & (hi < box))
                center = z
                if stuck.any():
                    half = np.minimum(half * 2, box)
                continue
            if point is None:
                break
            if np.all(step <= resolution):
                break
            half = np.maximum(3 * step, resolution)
        else:
            raise OracleError(f"grid refinement did not settle within {max_windows} windows")
    if point is None:
        raise OracleError(f"no feasible grid point at resolution {resolution:g}")
    bound = np.nan
    if lipschitz is not None:
        lip = np.broadcast_to(np.asarray(lipschitz, dtype=float), (n,))
        # moving a free coordinate by one step moves each basic one by |coupling|
        per_free = lip[free] + (np.abs(coupling).T @ lip[basic] if basic.size else 0.0)
        bound = float(resolution * np.sum(per_free))
    return GridResult(point, value, resolution, bound, evaluated)


def utility_lipschitz(table, upper) -> np.ndarray:
    """Bound on ``|u'(a)|`` for ``a`` in ``[0, upper]``, per edge."""
    upper = np.asarray(upper, dtype=float)
    rev = np.where(np.isin(table.kind, (KIND_LOG, KIND_THRESHOLD)), table.rate, 0.0)
    return np.abs(table.slope) + 2.0 * table.bend * upper + rev


def grid_search_oracle(inst: ProblemInstance, resolution: float = 1e-3, max_points: int = 200_000) -> OracleResult:
    """Brute-force optimum of a tiny instance (at most four free coordinates)."""
    require_valid(inst)
    A_eq, b_eq, A_ub, b_ub = _agent_rows(inst)
    n = inst.n_edges
    lay = inst.layout
    p_high = inst.target_bounds[1][lay.edge_target]
    q_high = inst.source_bounds[1][lay.edge_source]
    upper = np.minimum(p_high, q_high)
    lip = utility_lipschitz(inst.f_table, upper) + utility_lipschitz(inst.g_table, upper)

    def fn(x):
        return inst.f_table.value(x).sum(axis=1) + inst.g_table.value(x).sum(axis=1)

    res = grid_maximize(fn, n, resolution, A_eq, b_eq, A_ub, b_ub, upper=upper, lipschitz=lip,
                        max_points=max_points)
    return OracleResult(res.value, res.point, "grid", resolution=resolution, error_bound=res.error_bound)


# ---------------------------------------------------------------------- conic


def solve_convex(inst: ProblemInstance, solver: str = "CLARABEL") -> OracleResult:
    """General-instance optimum through cvxpy (interior point, ~1e-8 accuracy)."""
    import cvxpy as cp

    require_valid(inst)
    n = inst.n_edges
    x = cp.Variable(n, nonneg=True)
    terms = []
    for table in (inst.f_table, inst.g_table):
        terms.append(table.slope @ x - cp.sum(cp.multiply(table.bend, cp.square(x))) + table.offset.sum())
        log_idx = np.flatnonzero(table.kind == KIND_LOG)
        if log_idx.size:
            terms.append(table.rate[log_idx] @ cp.log1p(x[log_idx]))
        thr_idx = np.flatnonzero(table.kind == KIND_THRESHOLD)
        if thr_idx.size:
            terms.append(table.rate[thr_idx] @ cp.minimum(x[thr_idx], table.cap[thr_idx]))
    A_eq, b_eq, A_ub, b_ub = _agent_rows(inst)
    constraints = []
    if A_eq.shape[0]:
        constraints.append(A_eq @ x == b_eq)
    if A_ub.shape[0]:
        constraints.append(A_ub @ x <= b_ub)
    prob = cp.Problem(cp.Maximize(cp.sum(cp.hstack(terms))), constraints)
    try:
        prob.solve(solver=solver)
    except cp.SolverError as exc:
        raise OracleError(f"conic solver failed: {exc}") from exc
    if prob.status not in ("optimal", "optimal_inaccurate") or x.value is None:
        raise OracleError(f"conic solver returned status {prob.status!r}")
    plan = np.maximum(np.asarray(x.value, dtype=float), 0.0)
    return OracleResult(inst.objective(plan), plan, "conic")


def solve_oracle(inst: ProblemInstance, resolution: float = 1e-4) -> OracleResult:
    """Pick the most exact reference available: simplex, then grid, then conic."""
    if inst.is_all_linear():
        return solve_lp_centralized(inst)
    try:
        return grid_search_oracle(inst, resolution)
    except OracleError:
        return solve_convex(inst)
