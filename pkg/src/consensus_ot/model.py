"""Transport instances, utility families and feasibility checks.

An instance is a bipartite graph between targets (who receive resources) and
sources (who provide them).  Every edge carries two concave utilities: ``f``
for the target end and ``g`` for the source end.  The welfare of a plan is the
sum of both utilities over all edges.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InstanceError

FAMILIES = ("linear", "quadratic", "log", "threshold")

# revenue kinds used by the vectorized kernels
KIND_PLAIN = 0
KIND_LOG = 1
KIND_THRESHOLD = 2


@dataclass(frozen=True)
class Utility:
    """Concave utility of one edge endpoint, ``u(a)`` for an amount ``a >= 0``.

    ``u(a) = offset + revenue(a) - linear_cost * a - quadratic_cost * a**2``
    where the revenue depends on ``family``:

    ========== ==========================================
    linear     ``rate * a``
    quadratic  ``rate * a - curvature * a**2``
    log        ``rate * log(a + 1)``
    threshold  ``rate * min(a, cap)``
    ========== ==========================================

    Use the helper constructors (:func:`linear`, :func:`quadratic`, ...)
    rather than building instances by hand.
    """

    family: str = "linear"
    rate: float = 0.0
    offset: float = 0.0
    curvature: float = 0.0
    cap: float = 0.0
    linear_cost: float = 0.0
    quadratic_cost: float = 0.0

    def problems(self) -> list[str]:
        """Reasons this utility is not representable (empty when fine)."""
        out = []
        if self.family not in FAMILIES:
            return [f"unknown utility family {self.family!r}"]
        for name in ("rate", "offset", "curvature", "cap", "linear_cost", "quadratic_cost"):
            if not math.isfinite(getattr(self, name)):
                out.append(f"{name} is not finite")
        if self.curvature < 0 or self.quadratic_cost < 0:
            out.append("negative quadratic coefficient makes the utility convex")
        if self.family in ("log", "threshold") and self.rate < 0:
            out.append(f"{self.family} revenue needs rate >= 0 to stay concave")
        if self.family == "threshold" and self.cap < 0:
            out.append("threshold cap must be >= 0")
        if self.family != "quadratic" and self.curvature != 0:
            out.append(f"curvature is only meaningful for the quadratic family, got {self.family}")
        if self.family != "threshold" and self.cap != 0:
            out.append(f"cap is only meaningful for the threshold family, got {self.family}")
        return out

    @property
    def slope(self) -> float:
        """Coefficient of the linear part (revenue rate net of linear cost)."""
        if self.family in ("linear", "quadratic"):
            return self.rate - self.linear_cost
        return -self.linear_cost

    @property
    def bend(self) -> float:
        """Coefficient ``b >= 0`` of the ``-b * a**2`` part."""
        return self.curvature + self.quadratic_cost

    @property
    def kind(self) -> int:
        if self.family == "log":
            return KIND_LOG
        if self.family == "threshold":
            return KIND_THRESHOLD
        return KIND_PLAIN

    @property
    def revenue_rate(self) -> float:
        return self.rate if self.family in ("log", "threshold") else 0.0

    def __call__(self, amount: float) -> float:
        a = float(amount)
        if self.family == "log":
            rev = self.rate * math.log1p(a)
        elif self.family == "threshold":
            rev = self.rate * min(a, self.cap)
        else:
            rev = 0.0
        return self.offset + self.slope * a - self.bend * a * a + rev

    def derivative(self, amount: float) -> float:
        """Right derivative at ``amount`` (at a threshold kink this is the flat side)."""
        a = float(amount)
        d = self.slope - 2.0 * self.bend * a
        if self.family == "log":
            d += self.rate / (1.0 + a)
        elif self.family == "threshold" and a < self.cap:
            d += self.rate
        return d

    def left_derivative(self, amount: float) -> float:
        a = float(amount)
        if self.family == "threshold" and a == self.cap and a > 0:
            return self.slope - 2.0 * self.bend * a + self.rate
        return self.derivative(a)

    def to_dict(self) -> dict:
        out = {"family": self.family, "rate": self.rate}
        for name in ("offset", "curvature", "cap", "linear_cost", "quadratic_cost"):
            value = getattr(self, name)
            if value != 0:
                out[name] = value
        return out


def linear(rate: float, offset: float = 0.0, **costs) -> Utility:
    return Utility("linear", rate=rate, offset=offset, **costs)


def quadratic(curvature: float, rate: float = 0.0, offset: float = 0.0, **costs) -> Utility:
    """``offset + rate*a - curvature*a**2``."""
    return Utility("quadratic", rate=rate, offset=offset, curvature=curvature, **costs)


def log_revenue(rate: float, offset: float = 0.0, **costs) -> Utility:
    return Utility("log", rate=rate, offset=offset, **costs)


def threshold(rate: float, cap: float, offset: float = 0.0, **costs) -> Utility:
    return Utility("threshold", rate=rate, offset=offset, cap=cap, **costs)


class UtilityTable:
    """Column-wise coefficients of a list of utilities, for vectorized use."""

    def __init__(self, utilities: Sequence[Utility]):
        self.offset = np.array([u.offset for u in utilities], dtype=float)
        self.slope = np.array([u.slope for u in utilities], dtype=float)
        self.bend = np.array([u.bend for u in utilities], dtype=float)
        self.kind = np.array([u.kind for u in utilities], dtype=np.int8)
        self.rate = np.array([u.revenue_rate for u in utilities], dtype=float)
        self.cap = np.array([u.cap for u in utilities], dtype=float)

    def value(self, amounts: np.ndarray) -> np.ndarray:
        a = np.asarray(amounts, dtype=float)
        out = self.offset + self.slope * a - self.bend * a * a
        if np.any(self.kind == KIND_LOG):
            out = out + np.where(self.kind == KIND_LOG, self.rate * np.log1p(np.maximum(a, 0.0)), 0.0)
        if np.any(self.kind == KIND_THRESHOLD):
            out = out + np.where(self.kind == KIND_THRESHOLD, self.rate * np.minimum(a, self.cap), 0.0)
        return out

    def take(self, index: np.ndarray) -> dict[str, np.ndarray]:
        """Gather coefficients at ``index`` (any shape); entries with index -1 are zeroed."""
        idx = np.asarray(index)
        safe = np.where(idx < 0, 0, idx)
        out = {}
        for name in ("slope", "bend", "rate", "cap"):
            out[name] = np.where(idx < 0, 0.0, getattr(self, name)[safe])
        out["kind"] = np.where(idx < 0, KIND_PLAIN, self.kind[safe]).astype(np.int8)
        return out


@dataclass(frozen=True)
class TargetSpec:
    """A target demanding between ``lower`` and ``upper`` units in total."""

    id: str
    lower: float
    upper: float


@dataclass(frozen=True)
class SourceSpec:
    """A source supplying between ``lower`` and ``upper`` units in total."""

    id: str
    lower: float
    upper: float


@dataclass(frozen=True)
class Edge:
    target: str
    source: str
    f: Utility
    g: Utility

    @property
    def key(self) -> tuple[str, str]:
        return (self.target, self.source)


@dataclass(frozen=True)
class Layout:
    """Integer index structure of an instance, in canonical edge order.

    ``target_rows[i]`` lists the edge indices incident to target ``i`` (padded
    with -1), likewise ``source_rows`` for sources.
    """

    edge_target: np.ndarray
    edge_source: np.ndarray
    target_rows: np.ndarray
    source_rows: np.ndarray


def _padded_rows(groups: list[list[int]]) -> np.ndarray:
    width = max((len(g) for g in groups), default=0)
    rows = np.full((len(groups), width), -1, dtype=np.intp)
    for i, g in enumerate(groups):
        rows[i, : len(g)] = g
    return rows


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Targets, sources and the edges (with utilities) that may carry resources.

    Edges are kept in canonical order: by target position, then by source
    position.  Plans and per-edge state vectors use this order.
    """

    targets: tuple[TargetSpec, ...]
    sources: tuple[SourceSpec, ...]
    edges: tuple[Edge, ...]

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "sources", tuple(self.sources))
        t_pos = {t.id: i for i, t in enumerate(self.targets)}
        s_pos = {s.id: i for i, s in enumerate(self.sources)}
        order = sorted(
            self.edges,
            key=lambda e: (t_pos.get(e.target, len(t_pos)), s_pos.get(e.source, len(s_pos)), e.target, e.source),
        )
        object.__setattr__(self, "edges", tuple(order))

    def __eq__(self, other):
        if not isinstance(other, ProblemInstance):
            return NotImplemented
        return (self.targets, self.sources, self.edges) == (other.targets, other.sources, other.edges)

    __hash__ = None

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def edge_keys(self) -> tuple[tuple[str, str], ...]:
        return tuple(e.key for e in self.edges)

    @cached_property
    def edge_index(self) -> dict[tuple[str, str], int]:
        return {k: i for i, k in enumerate(self.edge_keys)}

    @cached_property
    def target_index(self) -> dict[str, int]:
        return {t.id: i for i, t in enumerate(self.targets)}

    @cached_property
    def source_index(self) -> dict[str, int]:
        return {s.id: i for i, s in enumerate(self.sources)}

    @cached_property
    def f_table(self) -> UtilityTable:
        return UtilityTable([e.f for e in self.edges])

    @cached_property
    def g_table(self) -> UtilityTable:
        return UtilityTable([e.g for e in self.edges])

    @cached_property
    def layout(self) -> Layout:
        et = np.array([self.target_index[e.target] for e in self.edges], dtype=np.intp)
        es = np.array([self.source_index[e.source] for e in self.edges], dtype=np.intp)
        t_groups: list[list[int]] = [[] for _ in self.targets]
        s_groups: list[list[int]] = [[] for _ in self.sources]
        for i, (t, s) in enumerate(zip(et, es)):
            t_groups[t].append(i)
            s_groups[s].append(i)
        return Layout(et, es, _padded_rows(t_groups), _padded_rows(s_groups))

    @cached_property
    def target_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([t.lower for t in self.targets], dtype=float),
                np.array([t.upper for t in self.targets], dtype=float))

    @cached_property
    def source_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([s.lower for s in self.sources], dtype=float),
                np.array([s.upper for s in self.sources], dtype=float))

    def sources_of(self, target_id: str) -> list[str]:
        return [e.source for e in self.edges if e.target == target_id]

    def targets_of(self, source_id: str) -> list[str]:
        return [e.target for e in self.edges if e.source == source_id]

    def is_equality_form(self) -> bool:
        return all(a.lower == a.upper for a in (*self.targets, *self.sources))

    def is_complete(self) -> bool:
        return self.n_edges == self.n_targets * self.n_sources and len(set(self.edge_keys)) == self.n_edges

    def is_all_linear(self) -> bool:
        return all(u.family == "linear" and u.quadratic_cost == 0 for e in self.edges for u in (e.f, e.g))

    def plan_array(self, plan) -> np.ndarray:
        """Coerce a plan given as a mapping ``{(target, source): amount}`` or a vector."""
        if isinstance(plan, Mapping):
            keys = set(plan)
            missing = [k for k in self.edge_keys if k not in keys]
            extra = sorted(keys - set(self.edge_keys), key=str)
            if missing or extra:
                raise InstanceError(f"plan keys do not match the edges (missing={missing}, extra={extra})")
            arr = np.array([plan[k] for k in self.edge_keys], dtype=float)
        else:
            arr = np.asarray(plan, dtype=float)
            if arr.shape != (self.n_edges,):
                raise InstanceError(f"plan has shape {arr.shape}, expected ({self.n_edges},)")
        return arr

    def plan_dict(self, amounts: np.ndarray) -> dict[tuple[str, str], float]:
        return {k: float(a) for k, a in zip(self.edge_keys, amounts)}

    def target_totals(self, amounts: np.ndarray) -> np.ndarray:
        return np.bincount(self.layout.edge_target, weights=amounts, minlength=self.n_targets)

    def source_totals(self, amounts: np.ndarray) -> np.ndarray:
        return np.bincount(self.layout.edge_source, weights=amounts, minlength=self.n_sources)

    def objective(self, amounts: np.ndarray) -> float:
        """Total surplus of an amount vector in canonical edge order (no checks)."""
        return float(np.sum(self.f_table.value(amounts)) + np.sum(self.g_table.value(amounts)))

    def replace(self, targets=None, sources=None, edges=None) -> "ProblemInstance":
        return ProblemInstance(
            self.targets if targets is None else tuple(targets),
            self.sources if sources is None else tuple(sources),
            self.edges if edges is None else tuple(edges),
        )


def build_instance(targets: Iterable[TargetSpec], sources: Iterable[SourceSpec], edges: Iterable[Edge]) -> ProblemInstance:
    return ProblemInstance(tuple(targets), tuple(sources), tuple(edges))


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def add(self, kind: str, message: str):
        self.violations.append(Violation(kind, message))

    def __str__(self):
        if self.ok:
            return "valid"
        return "; ".join(f"[{v.kind}] {v.message}" for v in self.violations)


def validate_instance(inst: ProblemInstance) -> ValidationReport:
    """List every structural problem of ``inst``; the instance is usable iff none."""
    report = ValidationReport()
    seen = set()
    for side, agents in (("target", inst.targets), ("source", inst.sources)):
        for a in agents:
            if a.id in seen:
                report.add("duplicate id", f"agent id {a.id!r} is used more than once")
            seen.add(a.id)
            if not (math.isfinite(a.lower) and not math.isnan(a.upper)):
                report.add("bound ordering", f"{side} {a.id!r} has non-finite lower bound")
            elif not (0 <= a.lower <= a.upper):
                report.add("bound ordering", f"{side} {a.id!r} needs 0 <= lower <= upper, got [{a.lower}, {a.upper}]")
    t_ids = {t.id for t in inst.targets}
    s_ids = {s.id for s in inst.sources}
    keys = set()
    for e in inst.edges:
        if e.key in keys:
            report.add("duplicate edge", f"edge {e.key} appears more than once")
        keys.add(e.key)
        if e.target not in t_ids or e.source not in s_ids:
            report.add("dangling edge", f"edge {e.key} references an unknown agent")
        for name, u in (("f", e.f), ("g", e.g)):
            for p in u.problems():
                kind = "unknown family" if p.startswith("unknown") else "concavity"
                report.add(kind, f"utility {name} on edge {e.key}: {p}")
    connected = {e.target for e in inst.edges} | {e.source for e in inst.edges}
    for a in (*inst.targets, *inst.sources):
        if a.id not in connected:
            report.add("orphan agent", f"agent {a.id!r} has no incident edge")
    return report


def require_valid(inst: ProblemInstance) -> ProblemInstance:
    report = validate_instance(inst)
    if not report.ok:
        raise InstanceError(f"invalid instance: {report}", report.violations)
    return inst


def check_necessity(inst: ProblemInstance) -> bool:
    """Necessary feasibility inequalities on demands and reachable supplies."""
    p_low, _ = inst.target_bounds
    _, q_high = inst.source_bounds
    lay = inst.layout
    reachable = np.bincount(lay.edge_target, weights=q_high[lay.edge_source], minlength=inst.n_targets)
    if np.any(p_low > reachable):
        return False
    return bool(p_low.sum() <= q_high.sum())


def check_sufficiency(inst: ProblemInstance) -> bool:
    """Every source can cover the minimum demand of all its neighbors at once."""
    p_low, _ = inst.target_bounds
    _, q_high = inst.source_bounds
    lay = inst.layout
    demand = np.bincount(lay.edge_source, weights=p_low[lay.edge_target], minlength=inst.n_sources)
    return bool(np.all(q_high >= demand))


def check_balance(inst: ProblemInstance, tol: float | None = None) -> bool:
    """Total demand equals total supply (equality-form instances only)."""
    if not inst.is_equality_form():
        raise InstanceError("balance is only defined for instances with lower == upper for every agent")
    p = sum(t.lower for t in inst.targets)
    q = sum(s.lower for s in inst.sources)
    if tol is None:
        tol = 1e-12 * max(1.0, p)
    return abs(p - q) <= tol


def total_surplus(inst: ProblemInstance, plan) -> float:
    """Sum of both endpoint utilities over every edge of ``plan``."""
    amounts = inst.plan_array(plan)
    if np.any(amounts < 0):
        bad = [inst.edge_keys[i] for i in np.flatnonzero(amounts < 0)]
        raise InstanceError(f"plan has negative amounts on edges {bad}")
    return inst.objective(amounts)


@dataclass(frozen=True, eq=False)
class LinearEqualityInstance:
    """Balanced transport problem with linear utilities on a complete graph.

    ``gamma[i, j]`` and ``delta[i, j]`` are the unit surpluses of target ``i``
    and source ``j`` on their shared edge.
    """

    p: np.ndarray
    q: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    target_ids: tuple[str, ...] = ()
    source_ids: tuple[str, ...] = ()

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float).reshape(p.size, q.size)
        delta = np.asarray(self.delta, dtype=float).reshape(p.size, q.size)
        for arr in (p, q, gamma, delta):
            arr.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "delta", delta)
        if not self.target_ids:
            object.__setattr__(self, "target_ids", tuple(f"t{i + 1}" for i in range(p.size)))
        if not self.source_ids:
            object.__setattr__(self, "source_ids", tuple(f"s{j + 1}" for j in range(q.size)))
        if np.any(p <= 0) or np.any(q <= 0):
            raise InstanceError("all masses must be positive")
        tol = 1e-12 * max(1.0, float(p.sum()))
        if abs(p.sum() - q.sum()) > tol:
            raise InstanceError(f"unbalanced instance: total demand {p.sum()!r} != total supply {q.sum()!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.gamma.shape

    @property
    def surplus(self) -> np.ndarray:
        return self.gamma + self.delta

    def to_problem(self) -> ProblemInstance:
        targets = [TargetSpec(t, float(v), float(v)) for t, v in zip(self.target_ids, self.p)]
        sources = [SourceSpec(s, float(v), float(v)) for s, v in zip(self.source_ids, self.q)]
        edges = [
            Edge(t, s, linear(float(self.gamma[i, j])), linear(float(self.delta[i, j])))
            for i, t in enumerate(self.target_ids)
            for j, s in enumerate(self.source_ids)
        ]
        return ProblemInstance(tuple(targets), tuple(sources), tuple(edges))

    @classmethod
    def from_problem(cls, inst: ProblemInstance) -> "LinearEqualityInstance":
        if not inst.is_equality_form():
            raise InstanceError("linear-equality form needs lower == upper for every agent")
        if not inst.is_complete():
            raise InstanceError("linear-equality form needs a complete bipartite graph")
        n, m = inst.n_targets, inst.n_sources
        gamma = np.zeros((n, m))
        delta = np.zeros((n, m))
        for e in inst.edges:
            for u in (e.f, e.g):
                if u.family != "linear" or u.offset != 0 or u.quadratic_cost != 0:
                    raise InstanceError(f"edge {e.key}: linear-equality form needs offset-free linear utilities")
            i, j = inst.target_index[e.target], inst.source_index[e.source]
            gamma[i, j] = e.f.slope
            delta[i, j] = e.g.slope
        return cls(
            inst.target_bounds[0].copy(), inst.source_bounds[0].copy(), gamma, delta,
            tuple(t.id for t in inst.targets), tuple(s.id for s in inst.sources),
        )

    def primal_value(self, plan: np.ndarray) -> float:
        return float(np.sum(np.asarray(plan).reshape(self.shape) * self.surplus))

    def dual_value(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(np.dot(u, self.p) + np.dot(v, self.q))
