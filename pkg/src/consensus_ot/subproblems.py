"""Exact solvers for the per-agent problems solved inside every iteration.

Two kinds of local problem show up:

* the proximal problem of an agent in the amount-bargaining loop::

      minimize  sum_j  -h_j(a_j) + c_j a_j + (eta/2) (a_j - r_j)**2
      s.t.      a_j >= 0,   lower <= sum_j a_j <= upper

  solved by a scalar multiplier ``mu`` on the sum constraint.  For a fixed
  ``mu`` every coordinate has a closed-form minimizer; the total is monotone
  in ``mu`` and piecewise linear between known breakpoints (except for log
  utilities, where we bisect), so ``mu`` is located exactly.

* the price-bargaining problem of an agent, solved through its dual, which is
  a Euclidean projection onto a scaled simplex (:func:`project_simplex`).

The kernels work on 2-D arrays (one row per agent, padded with a mask) so a
whole side of the market is solved in one call; a single agent is a batch of
one row and gets bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import KIND_LOG, KIND_THRESHOLD, Utility, UtilityTable

MAX_BISECTION = 200


def _rowsum(x: np.ndarray) -> np.ndarray:
    # sequential left-to-right sum: trailing zero padding never changes the result
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1])
    return np.cumsum(x, axis=-1)[..., -1]


def _response(s, kappa, kind, rate, cap, mask, has_log):
    """Coordinate minimizers for shifted linear terms ``s`` (see module docstring)."""
    x1 = (s + rate) / kappa
    x2 = s / kappa
    out = np.maximum(0.0, np.minimum(x1, np.maximum(x2, cap)))
    if has_log:
        t = s + rate
        d = kappa - s
        root = np.sqrt(np.maximum(d * d + 4.0 * kappa * t, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            pos = np.where(d >= 0, 2.0 * t / (d + root), (root - d) / (2.0 * kappa))
        out = np.where(kind == KIND_LOG, np.where(t > 0, pos, 0.0), out)
    return np.where(mask, out, 0.0)


def prox_rows(slope, bend, kind, rate, cap, linear, reference, eta, lower, upper, mask):
    """Solve one proximal problem per row.

    All per-coordinate arguments are ``(rows, width)`` arrays; ``lower`` and
    ``upper`` are ``(rows,)``.  Padding coordinates (``mask`` False) stay at 0.
    Returns ``(amounts, mu)``.
    """
    mask = np.asarray(mask, dtype=bool)
    kappa = eta + 2.0 * bend
    s0 = np.where(mask, slope - linear + eta * reference, 0.0)
    has_log = bool(np.any(mask & (kind == KIND_LOG)))
    has_thr = bool(np.any(mask & (kind == KIND_THRESHOLD)))
    rows = s0.shape[0]
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (rows,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (rows,))

    amounts = _response(s0, kappa, kind, rate, cap, mask, has_log)
    total = _rowsum(amounts)
    over = total > upper
    under = total < lower
    active = over | under
    mu = np.zeros(rows)
    if not np.any(active):
        return amounts, mu

    idx = np.flatnonzero(active)
    target = np.where(over, upper, lower)[idx]
    s0a, ka, kinda, ratea, capa, ma = (x[idx] for x in (s0, kappa, kind, rate, cap, mask))

    zero_at = s0a + ratea
    knots = [zero_at]
    if has_thr:
        knots += [zero_at - ka * capa, s0a - ka * capa]
    knots = np.concatenate(knots, axis=1)
    kmask = np.concatenate([ma] * (knots.shape[1] // ma.shape[1]), axis=1)
    top = np.max(np.where(ma, zero_at, -np.inf), axis=1)
    knots = np.sort(np.where(kmask, knots, top[:, None]), axis=1)

    def total_at(m):
        return _rowsum(_response(s0a - m[:, None], ka, kinda, ratea, capa, ma, has_log))

    def total_at_knots(k):
        return _rowsum(_response(s0a[:, None, :] - k[:, :, None], ka[:, None, :], kinda[:, None, :],
                                 ratea[:, None, :], capa[:, None, :], ma[:, None, :], has_log))

    s_knots = total_at_knots(knots)
    ok = s_knots >= target[:, None]
    nk = knots.shape[1]
    first_fail = np.where(ok.all(axis=1), nk, np.argmax(~ok, axis=1))
    r = np.arange(idx.size)
    a = knots[r, np.maximum(first_fail - 1, 0)]
    b = knots[r, np.minimum(first_fail, nk - 1)]
    sa = s_knots[r, np.maximum(first_fail - 1, 0)]
    sb = s_knots[r, np.minimum(first_fail, nk - 1)]
    inv_k = _rowsum(np.where(ma, 1.0 / ka, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        interior = a + (sa - target) * (b - a) / (sa - sb)
        below = knots[:, 0] - (target - s_knots[:, 0]) / inv_k
    m_sol = np.where(first_fail == nk, knots[:, -1], np.where(first_fail == 0, below, interior))

    row_log = np.any(ma & (kinda == KIND_LOG), axis=1)
    if np.any(row_log):
        span = target * np.max(np.where(ma, ka, 0.0), axis=1)
        floor = np.min(np.where(ma, s0a, np.inf), axis=1) - span - 1.0
        lo = np.where(first_fail == 0, np.minimum(floor, knots[:, 0]), a)
        hi = np.where(first_fail == nk, knots[:, -1], b)
        live = row_log & (first_fail < nk)
        for _ in range(MAX_BISECTION):
            if not np.any(live):
                break
            mid = 0.5 * (lo + hi)
            collapsed = (mid <= lo) | (mid >= hi)
            live = live & ~collapsed
            s_mid = total_at(mid)
            up = live & (s_mid >= target)
            lo = np.where(up, mid, lo)
            hi = np.where(live & ~up, mid, hi)
        s_lo, s_hi = total_at(lo), total_at(hi)
        pick = np.where(np.abs(s_lo - target) <= np.abs(s_hi - target), lo, hi)
        m_sol = np.where(row_log & (first_fail < nk), pick, m_sol)

    mu[idx] = m_sol
    amounts[idx] = _response(s0a - m_sol[:, None], ka, kinda, ratea, capa, ma, has_log)
    return amounts, mu


@dataclass(frozen=True)
class ProxProblem:
    """``min sum -h_j(a_j) + linear_j a_j + eta/2 (a_j - reference_j)^2``, ``a >= 0``, sum in ``[lower, upper]``."""

    utilities: tuple[Utility, ...]
    linear: np.ndarray
    reference: np.ndarray
    eta: float
    lower: float = 0.0
    upper: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "utilities", tuple(self.utilities))
        object.__setattr__(self, "linear", np.asarray(self.linear, dtype=float))
        object.__setattr__(self, "reference", np.asarray(self.reference, dtype=float))
        n = len(self.utilities)
        if self.linear.shape != (n,) or self.reference.shape != (n,):
            raise ValueError("linear and reference must have one entry per utility")
        if not (np.all(np.isfinite(self.linear)) and np.all(np.isfinite(self.reference))):
            raise ValueError("non-finite linear or reference terms")
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"eta must be a positive finite number, got {self.eta}")
        if math.isnan(self.lower) or math.isnan(self.upper) or not (0 <= self.lower <= self.upper):
            raise ValueError(f"need 0 <= lower <= upper, got [{self.lower}, {self.upper}]")
        if not math.isfinite(self.lower):
            raise ValueError("lower bound must be finite")

    def objective(self, amounts) -> float:
        a = np.asarray(amounts, dtype=float)
        h = UtilityTable(self.utilities).value(a)
        return float(np.sum(-h + self.linear * a + 0.5 * self.eta * (a - self.reference) ** 2))


@dataclass(frozen=True)
class ProxSolution:
    amounts: np.ndarray
    multiplier: float


def solve_prox(prob: ProxProblem) -> ProxSolution:
    """Unique minimizer of a proximal agent problem, with its sum multiplier."""
    table = UtilityTable(prob.utilities)
    row = lambda x: np.asarray(x, dtype=float)[None, :]
    amounts, mu = prox_rows(
        row(table.slope), row(table.bend), table.kind[None, :], row(table.rate), row(table.cap),
        row(prob.linear), row(prob.reference), prob.eta,
        np.array([prob.lower]), np.array([prob.upper]), np.ones((1, len(prob.utilities)), dtype=bool),
    )
    return ProxSolution(amounts[0], float(mu[0]))


def prox_kkt_residual(prob: ProxProblem, amounts, multiplier: float) -> float:
    """Largest violation of the optimality conditions at ``(amounts, multiplier)``."""
    a = np.asarray(amounts, dtype=float)
    worst = 0.0
    for u, x, c, r in zip(prob.utilities, a, prob.linear, prob.reference):
        base = c + multiplier + prob.eta * (x - r)
        hi = base - u.derivative(x)
        if x > 0:
            lo = base - u.left_derivative(x)
            worst = max(worst, lo, -hi) if not (lo <= 0 <= hi) else worst
        else:
            worst = max(worst, -hi)
        worst = max(worst, -x)
    total = float(np.sum(a))
    scale = max(1.0, abs(prob.upper) if math.isfinite(prob.upper) else prob.lower)
    if total > prob.upper:
        worst = max(worst, (total - prob.upper) / scale)
    if total < prob.lower:
        worst = max(worst, (prob.lower - total) / scale)
    if multiplier > 0:
        worst = max(worst, multiplier * abs(total - prob.upper) / scale if math.isfinite(prob.upper) else multiplier)
    elif multiplier < 0:
        worst = max(worst, -multiplier * abs(total - prob.lower) / scale)
    return worst


def _simplex_threshold(v: np.ndarray, mass) -> np.ndarray:
    n = v.shape[-1]
    srt = -np.sort(-v, axis=-1)
    css = np.cumsum(srt, axis=-1)
    mass = np.asarray(mass, dtype=float)[..., None]
    j = np.arange(1, n + 1, dtype=float)
    cond = srt - (css - mass) / j > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    css_rho = np.take_along_axis(css, rho[..., None], axis=-1)[..., 0]
    return (css_rho - mass[..., 0]) / (rho + 1.0)


def project_simplex(v, mass=1.0) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x >= 0, sum(x) = mass}``.

    ``v`` may be 2-D, in which case every row is projected (``mass`` may then
    be one value per row).
    """
    v = np.asarray(v, dtype=float)
    mass_arr = np.asarray(mass, dtype=float)
    if np.any(~(mass_arr > 0)):
        raise ValueError(f"mass must be positive, got {mass}")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a non-finite vector")
    if v.ndim == 1:
        theta = _simplex_threshold(v[None, :], mass_arr.reshape(1))[0]
        return np.maximum(v - theta, 0.0)
    theta = _simplex_threshold(v, np.broadcast_to(mass_arr, v.shape[:-1]))
    return np.maximum(v - theta[..., None], 0.0)


@dataclass(frozen=True)
class DualAgentProblem:
    """Local price-setting problem of one agent.

    For a target (``side="target"``) with mass ``p``::

        min  u p + sum_j beta_j w_j + eta_hat/2 sum_j (w_j - wbar_j)^2
        s.t. coef_j - u - w_j <= 0

    and for a source (``coef`` = delta, mass ``q``)::

        min  v q - sum_j beta_j w_j + eta_hat/2 sum_j (wbar_j - w_j)^2
        s.t. coef_j - v + w_j <= 0
    """

    side: str
    mass: float
    coef: np.ndarray
    wbar: np.ndarray
    beta: np.ndarray
    eta_hat: float

    def __post_init__(self):
        for name in ("coef", "wbar", "beta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.side not in ("target", "source"):
            raise ValueError(f"side must be 'target' or 'source', got {self.side!r}")
        if not (math.isfinite(self.mass) and self.mass > 0):
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not (math.isfinite(self.eta_hat) and self.eta_hat > 0):
            raise ValueError(f"eta_hat must be positive, got {self.eta_hat}")
        n = self.coef.size
        if n == 0 or self.wbar.shape != (n,) or self.beta.shape != (n,):
            raise ValueError("coef, wbar and beta must be non-empty vectors of equal length")
        for arr in (self.coef, self.wbar, self.beta):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite input to a dual agent problem")


@dataclass(frozen=True)
class DualAgentSolution:
    surplus: float
    prices: np.ndarray
    lambdas: np.ndarray


def dual_agent_rows(side, coef, wbar, beta, eta_hat, mass):
    """Vectorized :func:`solve_dual_agent` over rows; returns ``(surplus, prices, lambdas)``."""
    if side == "target":
        lam = project_simplex(beta + eta_hat * (coef - wbar), mass)
        prices = wbar + (lam - beta) / eta_hat
        surplus = np.max(coef - prices, axis=-1)
    else:
        lam = project_simplex(beta + eta_hat * (coef + wbar), mass)
        prices = wbar + (beta - lam) / eta_hat
        surplus = np.max(coef + prices, axis=-1)
    return surplus, prices, lam


def solve_dual_agent(prob: DualAgentProblem) -> DualAgentSolution:
    """Solve a price-setting problem through its simplex-constrained dual.

    The multipliers ``lambdas`` of the surplus constraints solve a simplex
    projection; prices follow from them by an affine recovery and the agent's
    surplus is the largest net pair surplus over its neighbors.
    """
    surplus, prices, lam = dual_agent_rows(prob.side, prob.coef, prob.wbar, prob.beta, prob.eta_hat, prob.mass)
    return DualAgentSolution(float(surplus), prices, lam)


def dual_agent_as_prox(prob: DualAgentProblem) -> ProxProblem:
    """The multiplier problem of a dual agent written as a proximal problem."""
    sign = 1.0 if prob.side == "target" else -1.0
    utilities = tuple(Utility("linear", rate=float(c)) for c in prob.coef)
    return ProxProblem(utilities, sign * prob.wbar, prob.beta, 1.0 / prob.eta_hat, prob.mass, prob.mass)


def agent_solution_kkt(prob: DualAgentProblem, sol: DualAgentSolution) -> float:
    """Complementary-slackness residual of a dual agent solution."""
    if prob.side == "target":
        slack = sol.surplus - (prob.coef - sol.prices)
    else:
        slack = sol.surplus - (prob.coef + sol.prices)
    return float(max(np.max(-slack), np.max(sol.lambdas * np.abs(slack))))

