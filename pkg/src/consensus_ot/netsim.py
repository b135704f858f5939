"""Synchronous message-passing execution of the bargaining algorithms.

Every agent runs as an isolated actor that holds only its own bounds and
utilities plus copies of the pair variables on its incident edges.  A round
has two barrier-separated phases:

1. *proposal*: each actor solves its local problem and sends its proposal
   for every incident edge to the agent on the other end;
2. *sync*: both endpoints of every edge apply the same pair update to the
   two proposals and send the result to each other, which lets either side
   detect a disagreement.

So a round carries ``2 |E|`` proposals and ``2 |E|`` sync messages.  The
observer that records traces reads actor state only after a round ends.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dual import DualState, record_dual
from .errors import ProtocolError
from .model import LinearEqualityInstance, ProblemInstance, UtilityTable, require_valid
from .primal import IterationTrace, PrimalState, pair_update, record
from .subproblems import dual_agent_rows, prox_rows

PROPOSAL = "Proposal"
PAIR_SYNC = "PairSync"
ALLOWED_FIELDS = {
    "primal": {PROPOSAL: frozenset({"amount"}), PAIR_SYNC: frozenset({"consensus", "multiplier"})},
    "dual": {PROPOSAL: frozenset({"price"}), PAIR_SYNC: frozenset({"consensus_price", "multiplier"})},
}


@dataclass(frozen=True)
class Message:
    round: int
    edge: tuple[str, str]
    sender: str
    receiver: str
    kind: str
    payload: dict

    def to_dict(self) -> dict:
        return {"round": self.round, "edge": list(self.edge), "sender": self.sender,
                "receiver": self.receiver, "kind": self.kind, "payload": dict(self.payload)}


class Actor:
    """Shared mailbox and edge bookkeeping; subclasses define the local solve."""

    mode = "primal"

    def __init__(self, agent_id: str, side: str, peers: list[str]):
        self.id = agent_id
        self.side = side
        self.peers = list(peers)
        n = len(self.peers)
        self.proposal = np.zeros(n)
        self.peer_proposal = np.zeros(n)
        self.consensus = np.zeros(n)
        self.multiplier = np.zeros(n)
        self.mailbox: dict[tuple[int, str, str], Message] = {}

    def edge(self, j: int) -> tuple[str, str]:
        peer = self.peers[j]
        return (self.id, peer) if self.side == "target" else (peer, self.id)

    def deliver(self, msg: Message):
        self.mailbox[(msg.round, msg.kind, msg.sender)] = msg

    def _take(self, k: int, kind: str, peer: str) -> Message:
        try:
            return self.mailbox.pop((k, kind, peer))
        except KeyError:
            edge = (self.id, peer) if self.side == "target" else (peer, self.id)
            raise ProtocolError(f"{self.id!r} is missing {kind} for edge {edge} in round {k}") from None

    def solve(self) -> np.ndarray:
        raise NotImplementedError

    def proposal_payload(self, value: float) -> dict:
        return {"amount": value}

    def sync_payload(self, consensus: float, multiplier: float) -> dict:
        return {"consensus": consensus, "multiplier": multiplier}

    def propose(self, k: int) -> list[Message]:
        self.proposal = self.solve()
        return [Message(k, self.edge(j), self.id, peer, PROPOSAL, self.proposal_payload(float(self.proposal[j])))
                for j, peer in enumerate(self.peers)]

    def sync(self, k: int, eta: float) -> list[Message]:
        key = next(iter(ALLOWED_FIELDS[self.mode][PROPOSAL]))
        self.peer_proposal = np.array([self._take(k, PROPOSAL, peer).payload[key] for peer in self.peers])
        if self.side == "target":
            pt, ps = self.proposal, self.peer_proposal
        else:
            pt, ps = self.peer_proposal, self.proposal
        self.consensus, self.multiplier = pair_update(pt, ps, self.multiplier, eta)
        return [Message(k, self.edge(j), self.id, peer, PAIR_SYNC,
                        self.sync_payload(float(self.consensus[j]), float(self.multiplier[j])))
                for j, peer in enumerate(self.peers)]

    def confirm(self, k: int):
        names = sorted(ALLOWED_FIELDS[self.mode][PAIR_SYNC])
        for j, peer in enumerate(self.peers):
            msg = self._take(k, PAIR_SYNC, peer)
            mine = self.sync_payload(float(self.consensus[j]), float(self.multiplier[j]))
            if any(msg.payload.get(n) != mine[n] for n in names):
                raise ProtocolError(f"endpoints of edge {self.edge(j)} disagree on the pair update in round {k}")


class PrimalActor(Actor):
    """An agent bargaining over amounts; private data are its bounds and utilities."""

    def __init__(self, agent_id, side, peers, lower, upper, utilities, eta):
        super().__init__(agent_id, side, peers)
        coef = UtilityTable(utilities)
        self._coef = {name: getattr(coef, name)[None, :] for name in ("slope", "bend", "kind", "rate", "cap")}
        self._bounds = (np.array([lower], dtype=float), np.array([upper], dtype=float))
        self._eta = eta

    def solve(self):
        sign = 1.0 if self.side == "target" else -1.0
        c = self._coef
        amounts, _ = prox_rows(c["slope"], c["bend"], c["kind"], c["rate"], c["cap"],
                               (sign * self.multiplier)[None, :], self.consensus[None, :], self._eta,
                               *self._bounds, np.ones((1, len(self.peers)), dtype=bool))
        return amounts[0]


class DualActor(Actor):
    """An agent bargaining over prices; private data are its mass and unit surpluses."""

    mode = "dual"

    def __init__(self, agent_id, side, peers, mass, coef, eta_hat):
        super().__init__(agent_id, side, peers)
        self._mass = float(mass)
        self._coef = np.asarray(coef, dtype=float)
        self._eta_hat = eta_hat
        self.surplus = 0.0
        self.lambdas = np.zeros(len(self.peers))

    def solve(self):
        # consensus holds the price w, multiplier holds beta
        surplus, prices, lam = dual_agent_rows(self.side, self._coef[None, :], self.consensus[None, :],
                                               self.multiplier[None, :], self._eta_hat, self._mass)
        self.surplus, self.lambdas = float(surplus[0]), lam[0]
        return prices[0]

    def proposal_payload(self, value):
        return {"price": value}

    def sync_payload(self, consensus, multiplier):
        return {"consensus_price": consensus, "multiplier": multiplier}


@dataclass
class Simulation:
    """Actors, edge list, message log and the observer's trace."""

    mode: str
    actors: dict[str, Actor]
    edges: tuple[tuple[str, str], ...]
    penalty: float
    instance: object
    k: int = 0
    log: list[Message] = field(default_factory=list)
    trace: IterationTrace = field(default_factory=IterationTrace)
    schedule_seed: int | None = None
    keep_log: bool = True

    @classmethod
    def primal(cls, inst: ProblemInstance, eta: float = 1.0, **kw) -> "Simulation":
        require_valid(inst)
        lay = inst.layout
        actors: dict[str, Actor] = {}
        for i, t in enumerate(inst.targets):
            idx = lay.target_rows[i][lay.target_rows[i] >= 0]
            actors[t.id] = PrimalActor(t.id, "target", [inst.edges[e].source for e in idx], t.lower, t.upper,
                                       [inst.edges[e].f for e in idx], eta)
        for j, s in enumerate(inst.sources):
            idx = lay.source_rows[j][lay.source_rows[j] >= 0]
            actors[s.id] = PrimalActor(s.id, "source", [inst.edges[e].target for e in idx], s.lower, s.upper,
                                       [inst.edges[e].g for e in idx], eta)
        return cls("primal", actors, inst.edge_keys, eta, inst, **kw)

    @classmethod
    def dual(cls, inst: LinearEqualityInstance, eta_hat: float = 1.0, **kw) -> "Simulation":
        actors: dict[str, Actor] = {}
        for i, t in enumerate(inst.target_ids):
            actors[t] = DualActor(t, "target", list(inst.source_ids), inst.p[i], inst.gamma[i], eta_hat)
        for j, s in enumerate(inst.source_ids):
            actors[s] = DualActor(s, "source", list(inst.target_ids), inst.q[j], inst.delta[:, j], eta_hat)
        edges = tuple((t, s) for t in inst.target_ids for s in inst.source_ids)
        return cls("dual", actors, edges, eta_hat, inst, **kw)

    def _order(self) -> list[Actor]:
        actors = list(self.actors.values())
        if self.schedule_seed is not None:
            rng = np.random.default_rng([self.schedule_seed, self.k])
            actors = [actors[i] for i in rng.permutation(len(actors))]
        return actors

    def _exchange(self, outgoing: list[Message]):
        # barrier: nothing is delivered until every actor has finished the phase
        for msg in outgoing:
            if msg.receiver not in self.actors:
                raise ProtocolError(f"message for unknown agent {msg.receiver!r} in round {msg.round}")
            self.actors[msg.receiver].deliver(msg)
        if self.keep_log:
            self.log.extend(outgoing)

    def state(self):
        """Global view assembled by the observer (canonical edge order)."""
        if self.mode == "primal":
            inst = self.instance
            vals = {name: np.zeros(inst.n_edges) for name in ("pt", "ps", "c", "a")}
            for actor in self.actors.values():
                for j in range(len(actor.peers)):
                    e = inst.edge_index[actor.edge(j)]
                    if actor.side == "target":
                        vals["pt"][e] = actor.proposal[j]
                        vals["c"][e] = actor.consensus[j]
                        vals["a"][e] = actor.multiplier[j]
                    else:
                        vals["ps"][e] = actor.proposal[j]
            return PrimalState(vals["pt"], vals["ps"], vals["c"], vals["a"], self.k, self.penalty)
        inst = self.instance
        ts = [self.actors[t] for t in inst.target_ids]
        ss = [self.actors[s] for s in inst.source_ids]
        return DualState(
            np.array([a.surplus for a in ts]), np.array([a.surplus for a in ss]),
            np.array([a.proposal for a in ts]), np.array([a.proposal for a in ss]).T,
            np.array([a.consensus for a in ts]), np.array([a.multiplier for a in ts]),
            np.array([a.lambdas for a in ts]), np.array([a.lambdas for a in ss]).T, self.k, self.penalty,
        )


def run_round(sim: Simulation) -> Simulation:
    """Advance every actor by one synchronous round and record the trace row."""
    prev = sim.state()
    k = sim.k + 1
    outgoing = [m for actor in sim._order() for m in actor.propose(k)]
    sim._exchange(outgoing)
    outgoing = [m for actor in sim._order() for m in actor.sync(k, sim.penalty)]
    sim._exchange(outgoing)
    for actor in sim._order():
        actor.confirm(k)
    sim.k = k
    if sim.mode == "primal":
        record(sim.trace, sim.instance, prev, sim.state())
    else:
        record_dual(sim.trace, sim.instance, prev, sim.state())
    return sim


def run_rounds(sim: Simulation, rounds: int) -> Simulation:
    for _ in range(rounds):
        run_round(sim)
    return sim


@dataclass
class AuditReport:
    rounds: int
    messages: int
    field_names: set[str]
    violations: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations


def audit_information_flow(sim: Simulation, rounds: int | None = None) -> AuditReport:
    """Check the message log: payload fields, edge-only traffic and per-round counts.

    ``rounds`` extra rounds are run first when given; the audit covers the
    whole log.
    """
    if rounds:
        run_rounds(sim, rounds)
    allowed = ALLOWED_FIELDS[sim.mode]
    edges = set(sim.edges)
    report = AuditReport(sim.k, len(sim.log), set())
    counts: dict[tuple[int, str], int] = {}
    for msg in sim.log:
        names = set(msg.payload)
        report.field_names |= names
        if msg.kind not in allowed:
            report.violations.append(f"round {msg.round}: unknown message kind {msg.kind!r}")
        elif names != allowed[msg.kind]:
            extra = sorted(names - allowed[msg.kind])
            report.violations.append(f"round {msg.round}: {msg.kind} on {msg.edge} from {msg.sender!r} "
                                     f"carries fields {sorted(names)} (not allowed: {extra})")
        if not all(isinstance(v, float) and math.isfinite(v) for v in msg.payload.values()):
            report.violations.append(f"round {msg.round}: non-scalar or non-finite payload on {msg.edge}")
        if msg.edge not in edges or {msg.sender, msg.receiver} != set(msg.edge):
            report.violations.append(f"round {msg.round}: message {msg.sender!r} -> {msg.receiver!r} "
                                     f"does not travel along edge {msg.edge}")
        counts[(msg.round, msg.kind)] = counts.get((msg.round, msg.kind), 0) + 1
    expected = 2 * len(sim.edges)
    for r in range(1, sim.k + 1):
        for kind in (PROPOSAL, PAIR_SYNC):
            got = counts.get((r, kind), 0)
            if got != expected:
                report.violations.append(f"round {r}: {got} {kind} messages, expected {expected}")
    all_allowed = set().union(*allowed.values())
    if sim.log and report.field_names != all_allowed:
        report.violations.append(f"payload field names {sorted(report.field_names)} != {sorted(all_allowed)}")
    return report


def write_message_log(sim: Simulation, path):
    """One JSON record per line: round, edge, sender, receiver, kind, payload."""
    with open(path, "w", encoding="utf-8") as fh:
        for msg in sim.log:
            fh.write(json.dumps(msg.to_dict()) + "\n")
