"""Amount bargaining: consensus ADMM on the transport plan.

Each round every target proposes the amounts it requests from its sources,
every source proposes what it offers, and each pair settles on the average
of the two proposals while a per-edge multiplier accumulates the
disagreement::

    consensus  <- (request + offer) / 2
    multiplier <- multiplier + eta/2 * (request - offer)

The four-variable form with two multipliers per edge is kept as
:func:`unsimplified_step`; from the first round on its two multipliers agree
and it reproduces :func:`primal_step`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, NonFiniteStateError
from .model import ProblemInstance, check_necessity, require_valid
from .subproblems import prox_rows

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e8


def _frozen(x) -> np.ndarray:
    a = np.array(x, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PrimalState:
    """Per-edge bargaining state, vectors in canonical edge order."""

    proposal_t: np.ndarray
    proposal_s: np.ndarray
    consensus: np.ndarray
    multiplier: np.ndarray
    k: int = 0
    eta: float = 1.0

    def __post_init__(self):
        for name in ("proposal_t", "proposal_s", "consensus", "multiplier"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")

    @classmethod
    def zeros(cls, inst: ProblemInstance, eta: float = 1.0) -> "PrimalState":
        z = np.zeros(inst.n_edges)
        return cls(z, z, z, z, 0, eta)

    def edge(self, inst: ProblemInstance, key) -> dict[str, float]:
        i = inst.edge_index[tuple(key)]
        return {
            "proposal_t": float(self.proposal_t[i]),
            "proposal_s": float(self.proposal_s[i]),
            "consensus": float(self.consensus[i]),
            "multiplier": float(self.multiplier[i]),
        }


@dataclass(frozen=True)
class UnsimplifiedState:
    """State of the four-update form: separate multipliers for both consensus constraints."""

    proposal_t: np.ndarray
    proposal_s: np.ndarray
    consensus: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray
    k: int = 0
    eta: float = 1.0

    def __post_init__(self):
        for name in ("proposal_t", "proposal_s", "consensus", "alpha1", "alpha2"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @classmethod
    def zeros(cls, inst: ProblemInstance, eta: float = 1.0) -> "UnsimplifiedState":
        z = np.zeros(inst.n_edges)
        return cls(z, z, z, z, z, 0, eta)

    @classmethod
    def from_primal(cls, state: PrimalState) -> "UnsimplifiedState":
        return cls(state.proposal_t, state.proposal_s, state.consensus,
                   state.multiplier, state.multiplier, state.k, state.eta)


@dataclass(frozen=True)
class StopRule:
    """Stop once both the request/offer gap and the consensus movement are small."""

    max_iterations: int = 20000
    primal_tol: float = 1e-8
    consensus_tol: float = 1e-8

    def __post_init__(self):
        if self.max_iterations < 1 or not (self.primal_tol > 0 and self.consensus_tol > 0):
            raise ValueError("stop rule needs max_iterations >= 1 and positive tolerances")

    def met(self, primal_residual: float, consensus_delta: float) -> bool:
        return primal_residual <= self.primal_tol and consensus_delta <= self.consensus_tol


@dataclass
class IterationTrace:
    """One row per completed iteration; ``k`` counts completed iterations."""

    k: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    primal_residual: list[float] = field(default_factory=list)
    consensus_delta: list[float] = field(default_factory=list)
    extra: dict[str, list[float]] = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    phases: list[tuple[int, str]] = field(default_factory=list)
    converged: bool = False
    likely_infeasible: bool = False

    def __len__(self):
        return len(self.k)

    def append(self, k, objective, primal_residual, consensus_delta, **extra):
        self.k.append(int(k))
        self.objective.append(float(objective))
        self.primal_residual.append(float(primal_residual))
        self.consensus_delta.append(float(consensus_delta))
        for name, value in extra.items():
            self.extra.setdefault(name, []).append(float(value))

    @property
    def iterations(self) -> int:
        return self.k[-1] if self.k else 0

    def columns(self) -> dict[str, list]:
        cols = {
            "k": self.k,
            "objective": self.objective,
            "primal_residual": self.primal_residual,
            "consensus_delta": self.consensus_delta,
        }
        cols.update(self.extra)
        return cols


def _side_rows(inst: ProblemInstance, side: str):
    # coefficients gathered once per instance; instances are immutable
    cache = inst.__dict__.setdefault("_side_rows", {})
    if side not in cache:
        lay = inst.layout
        rows = lay.target_rows if side == "target" else lay.source_rows
        table = inst.f_table if side == "target" else inst.g_table
        lower, upper = inst.target_bounds if side == "target" else inst.source_bounds
        cache[side] = (rows, rows >= 0, table.take(rows), lower, upper)
    return cache[side]


def agent_proposals(inst: ProblemInstance, side: str, linear: np.ndarray, reference: np.ndarray, eta: float):
    """Solve every agent problem of one side; returns per-edge proposals and the multipliers."""
    rows, mask, coef, lower, upper = _side_rows(inst, side)
    safe = np.where(mask, rows, 0)
    lin = np.where(mask, linear[safe], 0.0)
    ref = np.where(mask, reference[safe], 0.0)
    amounts, mu = prox_rows(coef["slope"], coef["bend"], coef["kind"], coef["rate"], coef["cap"],
                            lin, ref, eta, lower, upper, mask)
    out = np.empty(inst.n_edges)
    out[rows[mask]] = amounts[mask]
    return out, mu


def pair_update(proposal_t, proposal_s, multiplier, eta):
    """Average the two proposals and accumulate their gap into the multiplier."""
    consensus = 0.5 * (proposal_t + proposal_s)
    return consensus, multiplier + 0.5 * eta * (proposal_t - proposal_s)


def _check_finite(inst: ProblemInstance, k: int, **arrays):
    for name, arr in arrays.items():
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFiniteStateError(f"non-finite {name} on edge {inst.edge_keys[bad[0]]} at iteration {k}")


def primal_step(inst: ProblemInstance, state: PrimalState) -> PrimalState:
    """One full round: all targets, then all sources, then every pair."""
    _check_finite(inst, state.k, consensus=state.consensus, multiplier=state.multiplier)
    eta = state.eta
    pt, _ = agent_proposals(inst, "target", state.multiplier, state.consensus, eta)
    ps, _ = agent_proposals(inst, "source", -state.multiplier, state.consensus, eta)
    consensus, alpha = pair_update(pt, ps, state.multiplier, eta)
    _check_finite(inst, state.k + 1, proposal_t=pt, proposal_s=ps, multiplier=alpha)
    return PrimalState(pt, ps, consensus, alpha, state.k + 1, eta)


def unsimplified_step(inst: ProblemInstance, state: UnsimplifiedState) -> UnsimplifiedState:
    """Round of the two-multiplier form; the consensus update is its closed-form minimizer."""
    _check_finite(inst, state.k, consensus=state.consensus, alpha1=state.alpha1, alpha2=state.alpha2)
    eta = state.eta
    pt, _ = agent_proposals(inst, "target", state.alpha1, state.consensus, eta)
    ps, _ = agent_proposals(inst, "source", -state.alpha2, state.consensus, eta)
    consensus = (state.alpha1 - state.alpha2) / (2.0 * eta) + 0.5 * (pt + ps)
    alpha1 = state.alpha1 + eta * (pt - consensus)
    alpha2 = state.alpha2 + eta * (consensus - ps)
    _check_finite(inst, state.k + 1, proposal_t=pt, proposal_s=ps, alpha1=alpha1, alpha2=alpha2)
    return UnsimplifiedState(pt, ps, consensus, alpha1, alpha2, state.k + 1, eta)


@dataclass
class PrimalResult:
    plan: dict
    amounts: np.ndarray
    state: PrimalState
    trace: IterationTrace

    @property
    def converged(self) -> bool:
        return self.trace.converged

    @property
    def objective(self) -> float:
        return self.trace.objective[-1]


def record(trace: IterationTrace, inst: ProblemInstance, prev: PrimalState, state: PrimalState, oracle=None):
    """Append the row for ``state`` (reached from ``prev``) and return its residuals."""
    residual = float(np.linalg.norm(state.proposal_t - state.proposal_s))
    delta = float(np.linalg.norm(state.consensus - prev.consensus))
    value = inst.objective(state.consensus)
    extra = {}
    if oracle is not None:
        extra["oracle_gap"] = abs(value - oracle.value)
        extra["plan_residual"] = float(np.linalg.norm(state.consensus - oracle.plan))
    trace.append(state.k, value, residual, delta, **extra)
    return residual, delta


def iterate(inst, state, stop: StopRule, trace: IterationTrace, oracle=None, keep_snapshots=False,
            step=primal_step):
    """Advance ``state`` until ``stop`` is met; returns the last state."""
    for _ in range(stop.max_iterations):
        prev, state = state, step(inst, state)
        residual, delta = record(trace, inst, prev, state, oracle)
        if keep_snapshots:
            trace.snapshots.append(state)
        if np.max(np.abs(state.multiplier), initial=0.0) > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"multipliers exceeded {DIVERGENCE_LIMIT:g} at iteration {state.k}; "
                f"the instance is probably infeasible (necessity holds: {check_necessity(inst)})"
            )
        if stop.met(residual, delta):
            trace.converged = True
            break
    return state


def run_primal(inst: ProblemInstance, eta: float = 1.0, stop: StopRule | None = None,
               init: PrimalState | None = None, oracle=None, keep_snapshots: bool = False) -> PrimalResult:
    """Iterate amount bargaining from ``init`` (zeros by default) until ``stop``.

    ``oracle`` (anything with ``value`` and ``plan``) adds ``oracle_gap`` and
    ``plan_residual`` columns to the trace.
    """
    require_valid(inst)
    stop = stop or StopRule()
    state = init if init is not None else PrimalState.zeros(inst, eta)
    if init is not None and state.eta != eta:
        state = replace(state, eta=eta)
    trace = IterationTrace(likely_infeasible=not check_necessity(inst))
    if trace.likely_infeasible:
        log.warning("instance fails the necessity check; it is probably infeasible")
    state = iterate(inst, state, stop, trace, oracle, keep_snapshots)
    if not trace.converged:
        log.info("stopped after %d iterations without meeting the tolerances", state.k)
    return PrimalResult(inst.plan_dict(state.consensus), state.consensus, state, trace)
