"""Matching that keeps running while the market changes.

A script lists instance mutations keyed by iteration count.  Mutations
are applied between rounds and the bargaining state of every surviving
edge is carried over, so agents keep negotiating instead of restarting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InstanceError
from .model import Edge, ProblemInstance, SourceSpec, TargetSpec, Utility, require_valid
from .primal import DIVERGENCE_LIMIT, IterationTrace, PrimalState, StopRule, primal_step, record


@dataclass(frozen=True)
class SetBounds:
    agent: str
    lower: float
    upper: float

    def apply(self, inst: ProblemInstance) -> ProblemInstance:
        if self.agent in inst.target_index:
            targets = [TargetSpec(t.id, self.lower, self.upper) if t.id == self.agent else t for t in inst.targets]
            return inst.replace(targets=targets)
        if self.agent in inst.source_index:
            sources = [SourceSpec(s.id, self.lower, self.upper) if s.id == self.agent else s for s in inst.sources]
            return inst.replace(sources=sources)
        raise InstanceError(f"set_bounds: unknown agent {self.agent!r}")


@dataclass(frozen=True)
class SetUtility:
    """Replace the target-side (``side="f"``) or source-side (``"g"``) utility of one edge."""

    target: str
    source: str
    side: str
    utility: Utility

    def apply(self, inst: ProblemInstance) -> ProblemInstance:
        if self.side not in ("f", "g"):
            raise InstanceError(f"set_utility: side must be 'f' or 'g', got {self.side!r}")
        key = (self.target, self.source)
        if key not in inst.edge_index:
            raise InstanceError(f"set_utility: no edge {key}")
        edges = []
        for e in inst.edges:
            if e.key == key:
                e = Edge(e.target, e.source, self.utility, e.g) if self.side == "f" else Edge(e.target, e.source, e.f, self.utility)
            edges.append(e)
        return inst.replace(edges=edges)


@dataclass(frozen=True)
class AddEdge:
    edge: Edge

    def apply(self, inst: ProblemInstance) -> ProblemInstance:
        return inst.replace(edges=(*inst.edges, self.edge))


@dataclass(frozen=True)
class RemoveEdge:
    target: str
    source: str

    def apply(self, inst: ProblemInstance) -> ProblemInstance:
        key = (self.target, self.source)
        if key not in inst.edge_index:
            raise InstanceError(f"remove_edge: no edge {key}")
        return inst.replace(edges=[e for e in inst.edges if e.key != key])


@dataclass(frozen=True)
class AddAgent:
    """A new target or source together with its incident edges."""

    agent: TargetSpec | SourceSpec
    edges: tuple[Edge, ...]

    def apply(self, inst: ProblemInstance) -> ProblemInstance:
        own = self.agent.id
        if any(own not in e.key for e in self.edges):
            raise InstanceError(f"add_agent: every edge must touch {own!r}")
        if isinstance(self.agent, TargetSpec):
            return inst.replace(targets=(*inst.targets, self.agent), edges=(*inst.edges, *self.edges))
        return inst.replace(sources=(*inst.sources, self.agent), edges=(*inst.edges, *self.edges))


@dataclass(frozen=True)
class RemoveAgent:
    agent: str

    def apply(self, inst: ProblemInstance) -> ProblemInstance:
        if self.agent not in inst.target_index and self.agent not in inst.source_index:
            raise InstanceError(f"remove_agent: unknown agent {self.agent!r}")
        return inst.replace(
            targets=[t for t in inst.targets if t.id != self.agent],
            sources=[s for s in inst.sources if s.id != self.agent],
            edges=[e for e in inst.edges if self.agent not in e.key],
        )


Mutation = SetBounds | SetUtility | AddEdge | RemoveEdge | AddAgent | RemoveAgent


@dataclass(frozen=True)
class Event:
    """Mutations applied together once ``k`` iterations have completed."""

    k: int
    mutations: tuple

    def apply(self, inst: ProblemInstance) -> ProblemInstance:
        for m in self.mutations:
            inst = m.apply(inst)
        return require_valid(inst)


@dataclass(frozen=True)
class EventScript:
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        ks = [e.k for e in self.events]
        if any(k < 0 for k in ks) or any(b <= a for a, b in zip(ks, ks[1:])):
            raise InstanceError(f"event iterations must be non-negative and strictly increasing, got {ks}")

    @classmethod
    def from_pairs(cls, pairs) -> "EventScript":
        """Group ``(k, mutation)`` pairs; mutations sharing a ``k`` form one event."""
        grouped: dict[int, list] = {}
        for k, m in pairs:
            grouped.setdefault(int(k), []).append(m)
        return cls(tuple(Event(k, tuple(ms)) for k, ms in sorted(grouped.items())))

    def validate(self, inst: ProblemInstance) -> list[ProblemInstance]:
        """Instances of every phase; raises if any event yields an invalid instance."""
        phases = [require_valid(inst)]
        for ev in self.events:
            try:
                phases.append(ev.apply(phases[-1]))
            except InstanceError as exc:
                raise InstanceError(f"event at k={ev.k}: {exc}", exc.violations) from exc
        return phases


def carry_state(old: ProblemInstance, new: ProblemInstance, state: PrimalState) -> PrimalState:
    """Re-index edge state: surviving edges keep theirs, new edges start at zero."""
    src = np.array([old.edge_index.get(key, -1) for key in new.edge_keys], dtype=int)
    keep = src >= 0

    def take(arr):
        out = np.zeros(new.n_edges)
        out[keep] = arr[src[keep]]
        return out

    return PrimalState(take(state.proposal_t), take(state.proposal_s), take(state.consensus),
                       take(state.multiplier), state.k, state.eta)


def apply_event(inst: ProblemInstance, state: PrimalState, mutation) -> tuple[ProblemInstance, PrimalState]:
    """Apply one mutation (or an :class:`Event`) atomically and carry the state over."""
    if isinstance(mutation, Event):
        new = mutation.apply(inst)
    else:
        new = require_valid(mutation.apply(inst))
    return new, carry_state(inst, new, state)


@dataclass
class PhaseReport:
    start: int
    end: int
    instance: ProblemInstance
    oracle_value: float | None
    final_value: float
    final_residual: float
    plan: dict
    first_within: dict[float, int | None] = field(default_factory=dict)

    @property
    def relative_gap(self) -> float | None:
        if self.oracle_value is None:
            return None
        return abs(self.final_value - self.oracle_value) / max(abs(self.oracle_value), 1e-12)


@dataclass
class OnlineResult:
    trace: IterationTrace
    phases: list[PhaseReport]
    instance: ProblemInstance
    state: PrimalState


def run_online(inst: ProblemInstance, script: EventScript, eta: float = 1.0, total_iterations: int = 2000,
               oracle=None, warm_start: bool = True, stop: StopRule | None = None,
               gap_levels: tuple[float, ...] = (1e-2, 1e-3)) -> OnlineResult:
    """Iterate amount bargaining while applying ``script``.

    ``oracle`` is a callable ``instance -> OracleResult`` solved once per
    phase; with it the trace gains ``oracle_gap``/``plan_residual`` columns
    and each :class:`PhaseReport` records the first iteration at which the
    relative gap dropped below each of ``gap_levels``.  ``warm_start=False``
    resets the state at every event (the cold-restart baseline).  ``stop``
    may end the run early, but only once no events remain.
    """
    phases_inst = script.validate(inst)
    events = list(script.events)
    if events and events[-1].k >= total_iterations:
        raise InstanceError(f"event at k={events[-1].k} is beyond total_iterations={total_iterations}")
    state = PrimalState.zeros(inst, eta)
    trace = IterationTrace()
    reports: list[PhaseReport] = []
    current = phases_inst[0]
    boundaries = [0] + [ev.k for ev in events] + [total_iterations]

    for phase, (start, end) in enumerate(zip(boundaries, boundaries[1:])):
        if phase > 0:
            current = phases_inst[phase]
            if warm_start:
                state = carry_state(phases_inst[phase - 1], current, state)
            else:
                state = PrimalState(*(np.zeros(current.n_edges),) * 4, state.k, eta)
        trace.phases.append((start, f"phase {phase}"))
        reference = oracle(current) if oracle is not None else None
        first = {lvl: None for lvl in gap_levels}
        residual = np.inf
        last_phase = phase == len(events)
        while state.k < end:
            prev, state = state, primal_step(current, state)
            residual, delta = record(trace, current, prev, state, reference)
            if np.max(np.abs(state.multiplier), initial=0.0) > DIVERGENCE_LIMIT:
                raise DivergenceError(f"multipliers exceeded {DIVERGENCE_LIMIT:g} at iteration {state.k}")
            if reference is not None:
                rel = trace.extra["oracle_gap"][-1] / max(abs(reference.value), 1e-12)
                for lvl in gap_levels:
                    if first[lvl] is None and rel <= lvl:
                        first[lvl] = state.k
            if last_phase and stop is not None and stop.met(residual, delta):
                trace.converged = True
                break
        reports.append(PhaseReport(
            start, state.k, current, None if reference is None else reference.value,
            current.objective(state.consensus), float(residual), current.plan_dict(state.consensus), first,
        ))
    return OnlineResult(trace, reports, current, state)
