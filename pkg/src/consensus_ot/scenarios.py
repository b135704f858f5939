"""A small changing market used by the online examples and tests.

Three targets and two sources trade at first; after the first event
demands and supplies shift and target ``t1`` links to source ``s2``; after
the second, source ``s3`` joins serving ``t2`` and ``t3``; after the third,
``t1`` leaves.  Targets earn linear revenue, sources pay a quadratic
cost, targets accept up to 100 units and sources may sell nothing.
The numbers are illustrative, not taken from any measured market.
"""

from __future__ import annotations

from .model import Edge, ProblemInstance, SourceSpec, TargetSpec, linear, quadratic
from .online import AddAgent, AddEdge, EventScript, RemoveAgent, SetBounds, SetUtility


def market_scenario(phase_length: int = 400) -> tuple[ProblemInstance, EventScript]:
    """Initial instance and a three-event script with events every ``phase_length`` iterations."""
    targets = (TargetSpec("t1", 0.2, 100.0), TargetSpec("t2", 0.3, 100.0), TargetSpec("t3", 0.2, 100.0))
    sources = (SourceSpec("s1", 0.0, 1.0), SourceSpec("s2", 0.0, 1.0))
    edges = (
        Edge("t1", "s1", linear(0.8), quadratic(0.5)),
        Edge("t2", "s1", linear(0.6), quadratic(0.3)),
        Edge("t2", "s2", linear(0.7), quadratic(0.6)),
        Edge("t3", "s2", linear(0.9), quadratic(0.4)),
    )
    inst = ProblemInstance(targets, sources, edges)
    k1, k2, k3 = phase_length, 2 * phase_length, 3 * phase_length
    script = EventScript.from_pairs([
        (k1, SetBounds("t1", 0.4, 100.0)),
        (k1, SetBounds("t2", 0.1, 100.0)),
        (k1, SetBounds("t3", 0.35, 100.0)),
        (k1, SetBounds("s1", 0.0, 1.2)),
        (k1, SetBounds("s2", 0.0, 0.9)),
        (k1, AddEdge(Edge("t1", "s2", linear(0.5), quadratic(0.7)))),
        (k1, SetUtility("t2", "s1", "f", linear(0.85))),
        (k2, AddAgent(SourceSpec("s3", 0.0, 0.7), (
            Edge("t2", "s3", linear(0.75), quadratic(0.2)),
            Edge("t3", "s3", linear(0.65), quadratic(0.35)),
        ))),
        (k3, RemoveAgent("t1")),
    ])
    return inst, script
