import json

import numpy as np
import pytest

from consensus_ot.dual import run_dual
from consensus_ot.errors import ProtocolError
from consensus_ot.model import Edge, SourceSpec, TargetSpec, build_instance, linear, log_revenue, quadratic
from consensus_ot.netsim import (PAIR_SYNC, PROPOSAL, PrimalActor, Simulation, audit_information_flow,
                                 run_round, run_rounds, write_message_log)
from consensus_ot.primal import StopRule, run_primal

from conftest import random_balanced, random_bounded_instance


def forced_pair():
    return build_instance([TargetSpec("x", 5, 5)], [SourceSpec("y", 5, 5)],
                          [Edge("x", "y", quadratic(0.2, rate=1.0), log_revenue(1.0))])


def assert_same_trace(a, b):
    for name in ("objective", "primal_residual", "consensus_delta"):
        assert getattr(a, name) == getattr(b, name), name


def test_single_pair_messages():
    sim = run_round(Simulation.primal(forced_pair()))
    proposals = [m for m in sim.log if m.kind == PROPOSAL]
    syncs = [m for m in sim.log if m.kind == PAIR_SYNC]
    assert sorted(m.payload["amount"] for m in proposals) == [5.0, 5.0]
    assert [m.payload for m in syncs] == [{"consensus": 5.0, "multiplier": 0.0}] * 2
    assert {(m.sender, m.receiver) for m in sim.log} == {("x", "y"), ("y", "x")}


@pytest.mark.parametrize("seed", range(5))
def test_reproduces_primal_trace_bit_for_bit(seed):
    inst = random_bounded_instance(np.random.default_rng(seed), 4, 4, families=("linear", "quadratic", "log"))
    rounds = 150
    ref = run_primal(inst, stop=StopRule(rounds, 1e-300, 1e-300))
    sim = run_rounds(Simulation.primal(inst, schedule_seed=seed), rounds)
    assert_same_trace(sim.trace, ref.trace)
    s = sim.state()
    assert s.consensus.tobytes() == ref.state.consensus.tobytes()
    assert s.multiplier.tobytes() == ref.state.multiplier.tobytes()
    assert audit_information_flow(sim).clean


def test_reproduces_dual_trace():
    lin = random_balanced(np.random.default_rng(8), 3, 4)
    ref = run_dual(lin, stop=StopRule(100, 1e-300, 1e-300))
    sim = run_rounds(Simulation.dual(lin, schedule_seed=1), 100)
    assert_same_trace(sim.trace, ref.trace)
    assert sim.state().beta.tobytes() == ref.state.beta.tobytes()
    report = audit_information_flow(sim)
    assert report.clean and report.field_names == {"price", "consensus_price", "multiplier"}


def test_message_count():
    inst = build_instance([TargetSpec("x", 0.1, 2), TargetSpec("z", 0.1, 2)], [SourceSpec("a", 0, 1), SourceSpec("b", 0, 1)],
                          [Edge("x", "a", linear(1), linear(0)), Edge("x", "b", linear(1), linear(0)),
                           Edge("z", "b", linear(1), linear(0))])
    sim = Simulation.primal(inst)
    report = audit_information_flow(sim, rounds=10)
    assert report.messages == 120 and report.rounds == 10
    assert report.clean
    assert report.field_names == {"amount", "consensus", "multiplier"}


def test_schedule_does_not_change_results():
    inst = random_bounded_instance(np.random.default_rng(4), 3, 3)
    a = run_rounds(Simulation.primal(inst), 40)
    b = run_rounds(Simulation.primal(inst, schedule_seed=123), 40)
    assert_same_trace(a.trace, b.trace)


class LeakyActor(PrimalActor):
    def proposal_payload(self, value):
        return {"amount": value, "upper": float(self._bounds[1][0])}


class SilentActor(PrimalActor):
    def propose(self, k):
        self.proposal = self.solve()
        return []


def swap_actor(sim, agent_id, cls):
    old = sim.actors[agent_id]
    inst = sim.instance
    side = old.side
    spec = next(a for a in (inst.targets if side == "target" else inst.sources) if a.id == agent_id)
    edges = [inst.edges[inst.edge_index[old.edge(j)]] for j in range(len(old.peers))]
    utils = [e.f if side == "target" else e.g for e in edges]
    sim.actors[agent_id] = cls(agent_id, side, old.peers, spec.lower, spec.upper, utils, sim.penalty)


def test_leaking_actor_is_flagged():
    inst = random_bounded_instance(np.random.default_rng(2), 2, 2)
    sim = Simulation.primal(inst)
    swap_actor(sim, "t0", LeakyActor)
    report = audit_information_flow(sim, rounds=3)
    assert not report.clean
    assert any("upper" in v for v in report.violations)


def test_missing_message_raises():
    inst = random_bounded_instance(np.random.default_rng(2), 2, 2)
    sim = Simulation.primal(inst)
    swap_actor(sim, "s1", SilentActor)
    with pytest.raises(ProtocolError, match="round 1"):
        run_round(sim)


def test_message_log_file(tmp_path):
    sim = run_rounds(Simulation.primal(forced_pair()), 2)
    path = tmp_path / "log.jsonl"
    write_message_log(sim, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 8
    first = json.loads(lines[0])
    assert set(first) == {"round", "edge", "sender", "receiver", "kind", "payload"}
