"""Random instances, JSON documents and CSV traces.

Instance documents look like::

    {"targets": [{"id": "t1", "p_l": 0.1, "p_h": 100}],
     "sources": [{"id": "s1", "q_l": 0, "q_h": 0.7}],
     "edges":   [{"target": "t1", "source": "s1",
                  "f": {"family": "linear", "rate": 0.4},
                  "g": {"family": "quadratic", "rate": 0, "curvature": 0.3}}]}

An infinite upper bound is written as the string ``"inf"``.  Event
scripts are ``{"events": [{"k": 400, "op": "set_bounds", ...}, ...]}``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ParseError
from .model import (FAMILIES, Edge, LinearEqualityInstance, ProblemInstance, SourceSpec, TargetSpec, Utility,
                    linear, quadratic, require_valid)
from .online import AddAgent, AddEdge, EventScript, RemoveAgent, RemoveEdge, SetBounds, SetUtility


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator seeded with an unsigned 64-bit integer."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def generate_random_instance(n_targets: int, m_sources: int, seed: int, family: str = "linear",
                             mode: str = "equality", density: float = 1.0) -> ProblemInstance:
    """Seeded random instance.

    ``mode="equality"``: masses uniform on (0, 1) normalized to total 1,
    unit surpluses uniform on (0, 1), complete graph.

    ``mode="bounded"``: every target has ``p_h = 100``, every source
    ``q_l = 0`` and ``q_h ~ U(0, 1)``; target minimums are
    ``p_l = U(0, 1) * min(q_h) / n_targets`` so every source can always
    serve the minimum demand of all its neighbors.  Utility parameters are
    uniform on (0, 1) with zero offsets: ``linear`` is ``rate * a``,
    ``quadratic`` is ``-curvature * a**2`` and ``mixed`` picks one of the
    two per utility.  ``density < 1`` drops edges at random, keeping at
    least one edge per agent.
    """
    if n_targets < 1 or m_sources < 1:
        raise ValueError("need at least one target and one source")
    if family not in ("linear", "quadratic", "mixed"):
        raise ValueError(f"family must be linear, quadratic or mixed, got {family!r}")
    if mode not in ("equality", "bounded"):
        raise ValueError(f"mode must be equality or bounded, got {mode!r}")
    rng = make_rng(seed)
    t_ids = [f"t{i + 1}" for i in range(n_targets)]
    s_ids = [f"s{j + 1}" for j in range(m_sources)]

    if mode == "equality":
        p = rng.random(n_targets)
        q = rng.random(m_sources)
        p, q = p / p.sum(), q / q.sum()
        targets = [TargetSpec(t, float(v), float(v)) for t, v in zip(t_ids, p)]
        sources = [SourceSpec(s, float(v), float(v)) for s, v in zip(s_ids, q)]
    else:
        q_high = rng.random(m_sources)
        p_low = rng.random(n_targets) * q_high.min() / n_targets
        targets = [TargetSpec(t, float(v), 100.0) for t, v in zip(t_ids, p_low)]
        sources = [SourceSpec(s, 0.0, float(v)) for s, v in zip(s_ids, q_high)]

    gamma = rng.random((n_targets, m_sources))
    delta = rng.random((n_targets, m_sources))
    pick = rng.random((n_targets, m_sources, 2)) < 0.5
    keep = np.ones((n_targets, m_sources), dtype=bool)
    if mode == "bounded" and density < 1.0:
        keep = rng.random((n_targets, m_sources)) < density
        for i in range(n_targets):
            if not keep[i].any():
                keep[i, rng.integers(m_sources)] = True
        for j in range(m_sources):
            if not keep[:, j].any():
                keep[rng.integers(n_targets), j] = True

    def utility(value, quad):
        return quadratic(float(value)) if quad else linear(float(value))

    edges = []
    for i, t in enumerate(t_ids):
        for j, s in enumerate(s_ids):
            if not keep[i, j]:
                continue
            quad_f = family == "quadratic" or (family == "mixed" and pick[i, j, 0])
            quad_g = family == "quadratic" or (family == "mixed" and pick[i, j, 1])
            edges.append(Edge(t, s, utility(gamma[i, j], quad_f), utility(delta[i, j], quad_g)))
    return ProblemInstance(tuple(targets), tuple(sources), tuple(edges))


# ------------------------------------------------------------------ documents


def _num(x) -> float:
    if isinstance(x, str) and x.strip().lower() in ("inf", "infinity"):
        return math.inf
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise TypeError(f"expected a number, got {x!r}")
    return float(x)


def _out(x: float):
    return "inf" if x == math.inf else x


def utility_from_dict(d: dict, where: str) -> Utility:
    if not isinstance(d, dict):
        raise ParseError(f"{where}: utility must be an object")
    fam = d.get("family")
    if fam not in FAMILIES:
        raise ParseError(f"{where}: unknown utility family {fam!r}")
    known = {"family", "rate", "offset", "curvature", "cap", "linear_cost", "quadratic_cost"}
    extra = set(d) - known
    if extra:
        raise ParseError(f"{where}: unexpected utility fields {sorted(extra)}")
    try:
        kw = {k: _num(v) for k, v in d.items() if k != "family"}
    except TypeError as exc:
        raise ParseError(f"{where}: {exc}") from None
    return Utility(fam, **kw)


def _field(d: dict, name: str, where: str):
    if not isinstance(d, dict):
        raise ParseError(f"{where}: expected an object")
    if name not in d:
        raise ParseError(f"{where}: missing field {name!r}")
    return d[name]


def _number_field(d, name, where):
    try:
        return _num(_field(d, name, where))
    except TypeError as exc:
        raise ParseError(f"{where}: field {name!r}: {exc}") from None


def _label(kind, i, d):
    ident = d.get("id") if isinstance(d, dict) else None
    return f"{kind}[{i}]" + (f" (id {ident!r})" if ident is not None else "")


def instance_from_dict(doc: dict, validate: bool = True) -> ProblemInstance:
    if not isinstance(doc, dict):
        raise ParseError("instance document must be a JSON object")
    targets, sources, edges = [], [], []
    for i, d in enumerate(_field(doc, "targets", "instance")):
        where = _label("targets", i, d)
        targets.append(TargetSpec(str(_field(d, "id", where)), _number_field(d, "p_l", where),
                                  _number_field(d, "p_h", where)))
    for i, d in enumerate(_field(doc, "sources", "instance")):
        where = _label("sources", i, d)
        sources.append(SourceSpec(str(_field(d, "id", where)), _number_field(d, "q_l", where),
                                  _number_field(d, "q_h", where)))
    for i, d in enumerate(_field(doc, "edges", "instance")):
        where = f"edges[{i}]"
        t, s = str(_field(d, "target", where)), str(_field(d, "source", where))
        where = f"edges[{i}] ({t!r}, {s!r})"
        edges.append(Edge(t, s, utility_from_dict(_field(d, "f", where), where + ".f"),
                          utility_from_dict(_field(d, "g", where), where + ".g")))
    inst = ProblemInstance(tuple(targets), tuple(sources), tuple(edges))
    return require_valid(inst) if validate else inst


def instance_to_dict(inst: ProblemInstance) -> dict:
    return {
        "targets": [{"id": t.id, "p_l": t.lower, "p_h": _out(t.upper)} for t in inst.targets],
        "sources": [{"id": s.id, "q_l": s.lower, "q_h": _out(s.upper)} for s in inst.sources],
        "edges": [{"target": e.target, "source": e.source, "f": e.f.to_dict(), "g": e.g.to_dict()}
                  for e in inst.edges],
    }


def _load_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def _dump_json(doc, path):
    path = Path(path)
    try:
        path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror})") from exc


def parse_instance(path) -> ProblemInstance:
    doc = _load_json(path)
    try:
        return instance_from_dict(doc)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def serialize_instance(inst: ProblemInstance, path):
    _dump_json(instance_to_dict(inst), path)


def linear_equality_from(inst: ProblemInstance) -> LinearEqualityInstance:
    return LinearEqualityInstance.from_problem(inst)


# -------------------------------------------------------------------- scripts


def _edge_from(d, where) -> Edge:
    t, s = str(_field(d, "target", where)), str(_field(d, "source", where))
    return Edge(t, s, utility_from_dict(_field(d, "f", where), where + ".f"),
                utility_from_dict(_field(d, "g", where), where + ".g"))


def mutation_from_dict(d: dict, where: str):
    op = _field(d, "op", where)
    if op == "set_bounds":
        return SetBounds(str(_field(d, "agent", where)), _number_field(d, "lower", where),
                         _number_field(d, "upper", where))
    if op == "set_utility":
        return SetUtility(str(_field(d, "target", where)), str(_field(d, "source", where)),
                          str(_field(d, "side", where)), utility_from_dict(_field(d, "utility", where), where))
    if op == "add_edge":
        return AddEdge(_edge_from(d, where))
    if op == "remove_edge":
        return RemoveEdge(str(_field(d, "target", where)), str(_field(d, "source", where)))
    if op == "add_agent":
        side = _field(d, "side", where)
        ident = str(_field(d, "id", where))
        lo, hi = _number_field(d, "lower", where), _number_field(d, "upper", where)
        if side == "target":
            spec = TargetSpec(ident, lo, hi)
        elif side == "source":
            spec = SourceSpec(ident, lo, hi)
        else:
            raise ParseError(f"{where}: side must be 'target' or 'source', got {side!r}")
        edges = tuple(_edge_from(e, f"{where}.edges[{i}]") for i, e in enumerate(_field(d, "edges", where)))
        return AddAgent(spec, edges)
    if op == "remove_agent":
        return RemoveAgent(str(_field(d, "agent", where)))
    raise ParseError(f"{where}: unknown operation {op!r}")


def mutation_to_dict(m) -> dict:
    if isinstance(m, SetBounds):
        return {"op": "set_bounds", "agent": m.agent, "lower": m.lower, "upper": _out(m.upper)}
    if isinstance(m, SetUtility):
        return {"op": "set_utility", "target": m.target, "source": m.source, "side": m.side,
                "utility": m.utility.to_dict()}
    if isinstance(m, AddEdge):
        e = m.edge
        return {"op": "add_edge", "target": e.target, "source": e.source, "f": e.f.to_dict(), "g": e.g.to_dict()}
    if isinstance(m, RemoveEdge):
        return {"op": "remove_edge", "target": m.target, "source": m.source}
    if isinstance(m, AddAgent):
        side = "target" if isinstance(m.agent, TargetSpec) else "source"
        return {"op": "add_agent", "side": side, "id": m.agent.id, "lower": m.agent.lower,
                "upper": _out(m.agent.upper),
                "edges": [{"target": e.target, "source": e.source, "f": e.f.to_dict(), "g": e.g.to_dict()}
                          for e in m.edges]}
    if isinstance(m, RemoveAgent):
        return {"op": "remove_agent", "agent": m.agent}
    raise TypeError(f"not a mutation: {m!r}")


def script_from_dict(doc) -> EventScript:
    events = _field(doc, "events", "script")
    pairs = []
    for i, d in enumerate(events):
        where = f"events[{i}]"
        try:
            k = int(_field(d, "k", where))
        except (TypeError, ValueError):
            raise ParseError(f"{where}: k must be an integer") from None
        pairs.append((k, mutation_from_dict(d, where)))
    return EventScript.from_pairs(pairs)


def script_to_dict(script: EventScript) -> dict:
    return {"events": [{"k": ev.k, **mutation_to_dict(m)} for ev in script.events for m in ev.mutations]}


def parse_script(path) -> EventScript:
    doc = _load_json(path)
    try:
        return script_from_dict(doc)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def serialize_script(script: EventScript, path):
    _dump_json(script_to_dict(script), path)


# ----------------------------------------------------------- plans and prices


def plan_to_dict(plan: dict) -> dict:
    return {"plan": [{"target": t, "source": s, "amount": float(a)} for (t, s), a in plan.items()]}


def parse_plan(path) -> dict:
    doc = _load_json(path)
    out = {}
    for i, d in enumerate(_field(doc, "plan", str(path))):
        where = f"{path}: plan[{i}]"
        out[(str(_field(d, "target", where)), str(_field(d, "source", where)))] = _number_field(d, "amount", where)
    return out


def prices_to_dict(inst: LinearEqualityInstance, u, v, w) -> dict:
    w = np.asarray(w, dtype=float).reshape(inst.shape)
    return {
        "u": {t: float(x) for t, x in zip(inst.target_ids, u)},
        "v": {s: float(x) for s, x in zip(inst.source_ids, v)},
        "w": [{"target": t, "source": s, "price": float(w[i, j])}
              for i, t in enumerate(inst.target_ids) for j, s in enumerate(inst.source_ids)],
    }


def parse_prices(path, inst: LinearEqualityInstance):
    """Read ``(u, v, w)`` arrays ordered like ``inst``."""
    doc = _load_json(path)
    where = str(path)
    u_doc, v_doc = _field(doc, "u", where), _field(doc, "v", where)
    try:
        u = np.array([_num(u_doc[t]) for t in inst.target_ids])
        v = np.array([_num(v_doc[s]) for s in inst.source_ids])
    except KeyError as exc:
        raise ParseError(f"{where}: no price for agent {exc.args[0]!r}") from None
    w = np.full(inst.shape, np.nan)
    for i, d in enumerate(_field(doc, "w", where)):
        t, s = _field(d, "target", f"{where}: w[{i}]"), _field(d, "source", f"{where}: w[{i}]")
        if t not in inst.target_ids or s not in inst.source_ids:
            raise ParseError(f"{where}: w[{i}] names an unknown edge ({t!r}, {s!r})")
        w[inst.target_ids.index(t), inst.source_ids.index(s)] = _number_field(d, "price", f"{where}: w[{i}]")
    if np.isnan(w).any():
        raise ParseError(f"{where}: prices missing for some edges")
    return u, v, w


# --------------------------------------------------------------------- traces


def emit_trace(trace, path):
    """Write the trace as CSV, 17 significant digits per value."""
    cols = trace.columns()
    if not cols["k"]:
        raise ValueError("cannot write an empty trace")
    names = list(cols)
    phase_col = None
    if trace.phases:
        starts = [s for s, _ in trace.phases]
        phase_col = [sum(1 for s in starts if s < k) - 1 for k in cols["k"]]
        names.append("phase")
    lines = [",".join(names)]
    for r in range(len(cols["k"])):
        row = [str(cols["k"][r])] + [format(cols[n][r], ".17g") for n in names[1:] if n != "phase"]
        if phase_col is not None:
            row.append(str(phase_col[r]))
        lines.append(",".join(row))
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: cannot write trace ({exc.strerror})") from exc
