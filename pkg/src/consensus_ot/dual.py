"""Price bargaining for the balanced linear transport problem.

Instead of amounts, agents bargain over a per-edge price ``w``: each target
keeps the surplus ``u = max_j(gamma_j - w_j)`` and each source the surplus
``v = max_i(delta_i + w_i)``.  Agent updates go through the simplex-projection
form of their local problems (:func:`~consensus_ot.subproblems.dual_agent_rows`),
and the multiplier ``beta`` of the price consensus constraint converges to an
optimal transport plan.

With ``eta_hat = 1 / eta`` and zero initialization the iterates coincide with
amount bargaining on the same instance: ``lambda_t`` is the target proposal,
``lambda_s`` the source proposal, ``beta`` the consensus amount and ``w`` the
amount multiplier.  :func:`check_equivalence` verifies this numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InstanceError, NonFiniteStateError
from .model import LinearEqualityInstance
from .primal import IterationTrace, PrimalState, StopRule, pair_update, primal_step
from .subproblems import dual_agent_rows


def _frozen(x) -> np.ndarray:
    a = np.array(x, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DualState:
    """Surpluses per agent and (n_targets, n_sources) price/plan matrices."""

    u: np.ndarray
    v: np.ndarray
    w_t: np.ndarray
    w_s: np.ndarray
    w: np.ndarray
    beta: np.ndarray
    lam_t: np.ndarray
    lam_s: np.ndarray
    k: int = 0
    eta_hat: float = 1.0

    def __post_init__(self):
        for name in ("u", "v", "w_t", "w_s", "w", "beta", "lam_t", "lam_s"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if not self.eta_hat > 0:
            raise ValueError(f"eta_hat must be positive, got {self.eta_hat}")

    @classmethod
    def zeros(cls, inst: LinearEqualityInstance, eta_hat: float = 1.0) -> "DualState":
        n, m = inst.shape
        z = np.zeros((n, m))
        return cls(np.zeros(n), np.zeros(m), z, z, z, z, z, z, 0, eta_hat)


def _check_finite(inst: LinearEqualityInstance, k: int, **arrays):
    for name, arr in arrays.items():
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            i, j = bad[0]
            raise NonFiniteStateError(
                f"non-finite {name} on edge ({inst.target_ids[i]!r}, {inst.source_ids[j]!r}) at iteration {k}"
            )


def dual_step(inst: LinearEqualityInstance, state: DualState) -> DualState:
    """One round: target price proposals, source price proposals, pair updates."""
    _check_finite(inst, state.k, w=state.w, beta=state.beta)
    eh = state.eta_hat
    u, w_t, lam_t = dual_agent_rows("target", inst.gamma, state.w, state.beta, eh, inst.p)
    v, w_s_t, lam_s_t = dual_agent_rows("source", inst.delta.T, state.w.T, state.beta.T, eh, inst.q)
    w_s, lam_s = w_s_t.T, lam_s_t.T
    w, beta = pair_update(w_t, w_s, state.beta, eh)
    _check_finite(inst, state.k + 1, w_t=w_t, w_s=w_s, beta=beta)
    return DualState(u, v, w_t, w_s, w, beta, lam_t, lam_s, state.k + 1, eh)


@dataclass(frozen=True)
class DualPrices:
    """Dual point both as iterated (``raw_*``) and shifted so that ``min(u) == 0``."""

    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    raw_u: np.ndarray
    raw_v: np.ndarray
    raw_w: np.ndarray
    shift: float


@dataclass
class DualResult:
    prices: DualPrices
    plan: dict
    amounts: np.ndarray
    state: DualState
    trace: IterationTrace

    @property
    def converged(self) -> bool:
        return self.trace.converged

    @property
    def objective(self) -> float:
        return self.trace.objective[-1]


def record_dual(trace: IterationTrace, inst: LinearEqualityInstance, prev: DualState, state: DualState, oracle=None):
    """Append the row for ``state``; returns (price residual, price movement)."""
    residual = float(np.linalg.norm(state.w_t - state.w_s))
    delta = float(np.linalg.norm(state.w - prev.w))
    value = inst.dual_value(state.u, state.v)
    mass = np.concatenate([state.beta.sum(axis=1) - inst.p, state.beta.sum(axis=0) - inst.q])
    extra = {"mass_residual": float(np.linalg.norm(mass))}
    if oracle is not None:
        extra["oracle_gap"] = abs(value - oracle.value)
        extra["plan_residual"] = float(np.linalg.norm(state.beta.ravel() - np.ravel(oracle.plan)))
    trace.append(state.k, value, residual, delta, **extra)
    return residual, delta


def run_dual(inst: LinearEqualityInstance, eta_hat: float = 1.0, stop: StopRule | None = None,
             init: DualState | None = None, oracle=None) -> DualResult:
    """Iterate price bargaining until both price residual and price movement are small.

    The recovered plan is ``beta`` at termination.  ``oracle`` (with ``value``
    and ``plan``) adds gap columns to the trace.
    """
    stop = stop or StopRule()
    state = init if init is not None else DualState.zeros(inst, eta_hat)
    trace = IterationTrace()
    for _ in range(stop.max_iterations):
        prev, state = state, dual_step(inst, state)
        residual, delta = record_dual(trace, inst, prev, state, oracle)
        if stop.met(residual, delta):
            trace.converged = True
            break
    shift = -float(np.min(state.u))
    u, v, _, _ = shift_solution(state.u, state.v, state.w_t, state.w_s, shift)
    prices = DualPrices(u, v, state.w - shift, state.u, state.v, state.w, shift)
    amounts = state.beta.ravel().copy()
    problem = inst.to_problem()
    return DualResult(prices, problem.plan_dict(amounts), amounts, state, trace)


def shift_solution(u, v, w_t, w_s, C: float):
    """Move surplus ``C`` from every source to every target; objective and residuals are unchanged under balance."""
    u, v, w_t, w_s = (np.asarray(a, dtype=float) for a in (u, v, w_t, w_s))
    return u + C, v - C, w_t - C, w_s - C


@dataclass
class EquivalenceReport:
    """Per-iteration largest deviation between amount and price bargaining."""

    deviations: list[float] = field(default_factory=list)
    tol: float = 1e-9
    first_failure: tuple | None = None

    @property
    def ok(self) -> bool:
        return self.first_failure is None

    @property
    def max_deviation(self) -> float:
        return max(self.deviations, default=0.0)


def check_equivalence(inst: LinearEqualityInstance, eta: float = 1.0, iterations: int = 500,
                      eta_hat: float | None = None, tol: float = 1e-9) -> EquivalenceReport:
    """Run both algorithms from zero side by side and compare them under the variable mapping.

    ``eta_hat`` defaults to ``1 / eta``; passing anything else is a negative
    control and should produce a failing report.
    """
    eta_hat = 1.0 / eta if eta_hat is None else eta_hat
    problem = inst.to_problem()
    shape = inst.shape
    p_state = PrimalState.zeros(problem, eta)
    d_state = DualState.zeros(inst, eta_hat)
    report = EquivalenceReport(tol=tol)
    pairs = (("lam_t", "proposal_t"), ("lam_s", "proposal_s"), ("beta", "consensus"), ("w", "multiplier"))
    for _ in range(iterations):
        p_state = primal_step(problem, p_state)
        d_state = dual_step(inst, d_state)
        worst, where = 0.0, None
        for dual_name, primal_name in pairs:
            diff = np.abs(getattr(d_state, dual_name) - getattr(p_state, primal_name).reshape(shape))
            idx = np.unravel_index(np.argmax(diff), shape)
            if diff[idx] > worst:
                worst = float(diff[idx])
                where = (dual_name, primal_name, (inst.target_ids[idx[0]], inst.source_ids[idx[1]]))
        report.deviations.append(worst)
        if worst > tol and report.first_failure is None:
            report.first_failure = (d_state.k, *where, worst)
    return report


@dataclass(frozen=True)
class OptimalityCertificate:
    duality_gap: float
    dual_violation: float
    slackness_violation: float
    mass_residual: float
    negativity: float
    scale: float
    tol: float

    @property
    def optimal(self) -> bool:
        limit = self.tol * self.scale
        return max(self.duality_gap, self.dual_violation, self.slackness_violation,
                   self.mass_residual, self.negativity) <= limit


def certify_optimality(inst: LinearEqualityInstance, plan, u, v, w, tol: float = 1e-6) -> OptimalityCertificate:
    """Check a plan and a dual point against each other.

    Reports the duality gap, the worst dual-constraint violation, the worst
    complementary-slackness violation on edges carrying more than ``tol``,
    and the plan's mass residual; it certifies optimality when all of them
    are within ``tol`` times ``max(1, |primal value|, |dual value|)``.
    """
    n, m = inst.shape
    plan = np.asarray(plan, dtype=float)
    u, v, w = (np.asarray(a, dtype=float) for a in (u, v, w))
    if plan.size != n * m or u.shape != (n,) or v.shape != (m,) or w.size != n * m:
        raise InstanceError(
            f"dimension mismatch: expected plan/w with {n * m} entries, u of length {n}, v of length {m}"
        )
    plan, w = plan.reshape(n, m), w.reshape(n, m)
    primal, dual = inst.primal_value(plan), inst.dual_value(u, v)
    dual_violation = max(
        float(np.max(inst.gamma - w - u[:, None])),
        float(np.max(inst.delta + w - v[None, :])),
        0.0,
    )
    reduced = np.abs(u[:, None] + v[None, :] - inst.surplus)
    support = plan > tol
    slackness = float(np.max(reduced[support], initial=0.0))
    mass = float(max(np.max(np.abs(plan.sum(axis=1) - inst.p)), np.max(np.abs(plan.sum(axis=0) - inst.q))))
    negativity = float(max(0.0, -np.min(plan)))
    scale = max(1.0, abs(primal), abs(dual))
    return OptimalityCertificate(abs(primal - dual), dual_violation, slackness, mass, negativity, scale, tol)
