"""Threat graph construction and analytics.

Edges keep the direction declared by their relationship object. Propagation
follows each relationship type's impact direction: ``forward`` edges carry
compromise source to target, ``reverse`` edges target to source, ``none``
edges not at all.
"""

from __future__ import annotations

import heapq
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from .schema import SchemaRegistry, builtin_registry
from .stix import Bundle, canonical_json

__all__ = [
    "ATTACK_TRAVERSAL_DEFAULT",
    "AttackPath",
    "CycleError",
    "Edge",
    "GraphBuildError",
    "ImpactReport",
    "MissingPatternProperty",
    "Node",
    "RiskReport",
    "ThreatGraph",
    "UnknownPattern",
    "UnknownRoot",
    "UnknownSeed",
    "attack_paths",
    "build_graph",
    "cascade_impact",
    "protection_coverage",
    "supply_chain_risk",
]

log = logging.getLogger(__name__)

ATTACK_TRAVERSAL_DEFAULT = frozenset({
    "controls-relationship", "monitors-relationship", "depends-on", "grid-synchronization",
})
DEPENDENCY_TYPES = ("contains", "depends-on")
ENTRY = "entry"


class GraphBuildError(ValueError):
    pass


class UnknownSeed(LookupError):
    pass


class UnknownRoot(LookupError):
    pass


class UnknownPattern(LookupError):
    pass


class MissingPatternProperty(ValueError):
    pass


class CycleError(ValueError):
    def __init__(self, cycle: list[str]):
        super().__init__("dependency cycle: " + " -> ".join(cycle))
        self.cycle = cycle


@dataclass(frozen=True)
class Node:
    id: str
    type: str
    properties: Mapping[str, Any] = field(compare=False, repr=False)


@dataclass(frozen=True, order=True)
class Edge:
    edge_id: str
    relationship_type: str
    source: str
    target: str
    amplification: float
    direction: str

    def propagation(self) -> tuple[str, str] | None:
        """(from, to) for impact propagation, or None for non-propagating edges."""
        if self.direction == "forward":
            return (self.source, self.target)
        if self.direction == "reverse":
            return (self.target, self.source)
        return None


class ThreatGraph:
    """Directed multigraph of objects and typed relationship edges. Immutable once built."""

    def __init__(self, nodes: Iterable[Node], edges: Iterable[Edge], registry: SchemaRegistry,
                 skipped: Iterable[str] = ()):
        self.nodes: Mapping[str, Node] = MappingProxyType({n.id: n for n in sorted(nodes, key=lambda n: n.id)})
        self.edges: tuple[Edge, ...] = tuple(sorted(edges))
        self.registry = registry
        self.skipped: tuple[str, ...] = tuple(skipped)
        for e in self.edges:
            if e.source not in self.nodes or e.target not in self.nodes:
                raise GraphBuildError(f"edge {e.edge_id} has an endpoint outside the graph")
        forward: dict[str, list[tuple[str, float]]] = defaultdict(list)
        for e in self.edges:
            hop = e.propagation()
            if hop is not None and e.amplification > 0:
                forward[hop[0]].append((hop[1], e.amplification))
        self._propagation = {k: tuple(v) for k, v in forward.items()}

    def propagation_out(self, node_id: str) -> tuple[tuple[str, float], ...]:
        return self._propagation.get(node_id, ())

    def edges_of_type(self, *rel_types: str) -> list[Edge]:
        return [e for e in self.edges if e.relationship_type in rel_types]

    def is_a(self, node_id: str, type_name: str) -> bool:
        return self.registry.conforms(self.nodes[node_id].type, (type_name,))

    def to_dict(self) -> dict[str, Any]:
        return {
            "nodes": [{"id": n.id, "type": n.type} for n in self.nodes.values()],
            "edges": [{"id": e.edge_id, "relationship_type": e.relationship_type, "source": e.source,
                       "target": e.target, "amplification": e.amplification, "direction": e.direction}
                      for e in self.edges],
        }


def build_graph(bundle: Bundle, registry: SchemaRegistry | None = None) -> ThreatGraph:
    """One node per non-relationship object, one edge per relationship with a registered constraint."""
    registry = registry or builtin_registry()
    latest = bundle.latest()
    nodes = [Node(o.id, o.type, MappingProxyType(o.to_dict())) for o in latest.values() if not o.is_relationship]
    node_ids = {n.id for n in nodes}
    edges: list[Edge] = []
    skipped: list[str] = []
    for obj in latest.values():
        if not obj.is_relationship:
            continue
        rel = obj.relationship_type
        constraint = registry.constraints.get(rel) if isinstance(rel, str) else None
        if constraint is None:
            skipped.append(f"{obj.id}: relationship type {rel!r} is not registered")
            continue
        src, tgt = obj.source_ref, obj.target_ref
        if src in latest and latest[src].is_relationship or tgt in latest and latest[tgt].is_relationship:
            skipped.append(f"{obj.id}: {rel} connects a relationship object")
            continue
        for ref in (src, tgt):
            if ref not in node_ids:
                raise GraphBuildError(f"{obj.id}: reference {ref!r} does not resolve")
        amplification = constraint.default_amplification
        if "amplification" in obj:
            value = obj.get("amplification")
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0 <= value <= 1:
                raise GraphBuildError(f"{obj.id}: amplification {value!r} is not a fraction in [0, 1]")
            amplification = float(value)
        edges.append(Edge(obj.id, rel, src, tgt, amplification, constraint.impact_direction))
    for note in skipped:
        log.info("build_graph: %s", note)
    return ThreatGraph(nodes, edges, registry, skipped)


# -- cascading impact -----------------------------------------------------------------

@dataclass(frozen=True)
class ImpactReport:
    scores: Mapping[str, float]
    seeds: frozenset[str]
    hop_limit: int

    def ranked(self) -> list[tuple[str, float]]:
        return sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0]))

    def to_dict(self) -> dict[str, Any]:
        return {"hop_limit": self.hop_limit, "seeds": sorted(self.seeds),
                "scores": dict(sorted(self.scores.items()))}


def cascade_impact(graph: ThreatGraph, seeds: Iterable[str], hop_limit: int = 6) -> ImpactReport:
    """Worst single-chain impact: the max over propagation paths of the product of amplifications.

    Best-first search over (score, hops) labels. A label is dropped when an
    earlier (hence at least as strong) label reached the same node in no more
    hops; amplifications never exceed 1, so this keeps the search exact under
    the hop limit.
    """
    seeds = frozenset(seeds)
    if hop_limit < 1:
        raise ValueError("hop_limit must be a positive integer")
    for s in seeds:
        if s not in graph.nodes:
            raise UnknownSeed(s)
    scores: dict[str, float] = {}
    fewest_hops: dict[str, int] = {}
    heap = [(-1.0, 0, s) for s in sorted(seeds)]
    heapq.heapify(heap)
    while heap:
        neg, hops, node = heapq.heappop(heap)
        if node in fewest_hops and fewest_hops[node] <= hops:
            continue
        fewest_hops[node] = hops
        scores.setdefault(node, -neg)
        if hops == hop_limit:
            continue
        for nxt, amp in graph.propagation_out(node):
            score = -neg * amp
            if score > 0 and not (nxt in fewest_hops and fewest_hops[nxt] <= hops + 1):
                heapq.heappush(heap, (-score, hops + 1, nxt))
    return ImpactReport(MappingProxyType(scores), seeds, hop_limit)


# -- supply-chain risk --------------------------------------------------------------------

@dataclass(frozen=True)
class RiskReport:
    root: str
    aggregate_risk: Mapping[str, float]
    supplier_shares: Mapping[str, float]
    hhi: float | None
    shared_dependencies: frozenset[str]

    def to_dict(self) -> dict[str, Any]:
        return {"root": self.root, "aggregate_risk": dict(sorted(self.aggregate_risk.items())),
                "supplier_shares": dict(sorted(self.supplier_shares.items())), "hhi": self.hhi,
                "shared_dependencies": sorted(self.shared_dependencies)}


def _dependency_children(graph: ThreatGraph) -> dict[str, list[str]]:
    children: dict[str, set[str]] = defaultdict(set)
    for e in graph.edges_of_type(*DEPENDENCY_TYPES):
        children[e.source].add(e.target)
    return {k: sorted(v) for k, v in children.items()}


def _find_cycle(root: str, children: Mapping[str, list[str]]) -> list[str] | None:
    state: dict[str, int] = {}
    stack: list[str] = []

    def visit(node: str) -> list[str] | None:
        state[node] = 1
        stack.append(node)
        for child in children.get(node, ()):
            if state.get(child) == 1:
                return stack[stack.index(child):] + [child]
            if child not in state:
                found = visit(child)
                if found:
                    return found
        state[node] = 2
        stack.pop()
        return None

    return visit(root)


def linked_base_risk(graph: ThreatGraph, node_id: str) -> float:
    """Noisy-or of ``risk-score`` over supply-chain-risk objects attached to a node."""
    risk = 0.0
    for e in graph.edges_of_type("has-supply-chain-risk"):
        if e.source != node_id:
            continue
        score = graph.nodes[e.target].properties.get("risk-score")
        if isinstance(score, (int, float)) and not isinstance(score, bool):
            risk = noisy_or(risk, float(score))
    return risk


def noisy_or(a: float, b: float) -> float:
    """1 - (1 - a)(1 - b), in a form that is exact when either side is 0."""
    return a + b - a * b


def supply_chain_risk(graph: ThreatGraph, root: str,
                      base_risk: Mapping[str, float] | None = None) -> RiskReport:
    """Aggregate risk over contains/depends-on edges, assuming independent child compromise.

    risk(c) = 1 - (1 - b(c)) * prod over children d of (1 - risk(d)), where b(c)
    comes from ``base_risk`` when given, otherwise from attached supply-chain-risk
    objects, otherwise 0.
    """
    if root not in graph.nodes:
        raise UnknownRoot(root)
    base_risk = dict(base_risk or {})
    for k, v in base_risk.items():
        if not 0 <= v <= 1:
            raise ValueError(f"base risk of {k} must lie in [0, 1]")
    children = _dependency_children(graph)
    cycle = _find_cycle(root, children)
    if cycle:
        raise CycleError(cycle)

    risk: dict[str, float] = {}
    order: list[str] = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if node in risk:
            continue
        kids = children.get(node, [])
        if not expanded:
            stack.append((node, True))
            stack.extend((k, False) for k in reversed(kids) if k not in risk)
            continue
        acc = base_risk[node] if node in base_risk else linked_base_risk(graph, node)
        for k in kids:
            acc = noisy_or(acc, risk[k])
        risk[node] = acc
        order.append(node)

    parents: dict[str, set[str]] = defaultdict(set)
    for node in risk:
        for k in children.get(node, []):
            parents[k].add(node)
    shared = frozenset(n for n, ps in parents.items() if len(ps) >= 2)

    weights: dict[str, float] = defaultdict(float)
    suppliers_of: dict[str, set[str]] = defaultdict(set)
    for e in graph.edges_of_type("supplied-by"):
        if graph.is_a(e.target, "supplier"):
            suppliers_of[e.source].add(e.target)
    for leaf in sorted(n for n in risk if not children.get(n)):
        sup = sorted(suppliers_of.get(leaf, ()))
        for s in sup:
            weights[s] += 1.0 / len(sup)
    total = sum(weights.values())
    shares = {s: w / total for s, w in sorted(weights.items())} if total else {}
    hhi = sum(v * v for v in shares.values()) if shares else None
    return RiskReport(root, MappingProxyType(risk), MappingProxyType(shares), hhi, shared)


# -- attack paths ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class AttackPath:
    steps: tuple[tuple[str, str], ...]
    pattern: str

    @property
    def nodes(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.steps)

    def __len__(self) -> int:
        return len(self.steps) - 1

    def to_dict(self) -> dict[str, Any]:
        return {"pattern": self.pattern, "steps": [{"node": n, "via": via} for n, via in self.steps]}


def _type_list(node_props: Mapping[str, Any], key: str, pattern: str) -> list[str]:
    value = node_props.get(key)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise MissingPatternProperty(f"{pattern} needs a list property {key!r}")
    return value


def attack_paths(graph: ThreatGraph, pattern: str,
                 traversal_types: Iterable[str] = ATTACK_TRAVERSAL_DEFAULT,
                 max_depth: int = 5) -> list[AttackPath]:
    """Every simple path from an entry-type node to a target-type node.

    Lateral movement treats each traversable relationship as a two-way channel,
    so edges are walked in either direction. Paths are ordered by node id
    sequence, then by the relationship types used.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be a positive integer")
    node = graph.nodes.get(pattern)
    if node is None or not (node.type == "attack-pattern" or graph.registry.conforms(node.type, ("grid-attack-pattern",))):
        raise UnknownPattern(pattern)
    entry_types = _type_list(node.properties, "entry-asset-types", pattern)
    target_types = _type_list(node.properties, "target-asset-types", pattern)
    traversal = frozenset(traversal_types)

    adjacency: dict[str, set[tuple[str, str]]] = defaultdict(set)
    for e in graph.edges:
        if e.relationship_type in traversal and e.source != e.target:
            adjacency[e.source].add((e.target, e.relationship_type))
            adjacency[e.target].add((e.source, e.relationship_type))
    ordered = {k: sorted(v) for k, v in adjacency.items()}

    conforms = graph.registry.conforms
    entries = [n.id for n in graph.nodes.values() if conforms(n.type, entry_types)]
    targets = {n.id for n in graph.nodes.values() if conforms(n.type, target_types)}

    found: set[tuple[tuple[str, str], ...]] = set()

    def extend(steps: list[tuple[str, str]], on_path: set[str]) -> None:
        here = steps[-1][0]
        if here in targets:
            found.add(tuple(steps))
        if len(steps) > max_depth:
            return
        for nxt, via in ordered.get(here, ()):
            if nxt in on_path:
                continue
            steps.append((nxt, via))
            on_path.add(nxt)
            extend(steps, on_path)
            on_path.discard(nxt)
            steps.pop()

    for start in entries:
        extend([(start, ENTRY)], {start})
    ranked = sorted(found, key=lambda s: (tuple(n for n, _ in s), tuple(v for _, v in s)))
    return [AttackPath(steps, pattern) for steps in ranked]


# -- protection coverage -----------------------------------------------------------------

def protection_coverage(graph: ThreatGraph) -> frozenset[str]:
    """Physical or grid assets that no ``protects-asset`` edge points at."""
    protected = {e.target for e in graph.edges_of_type("protects-asset")}
    return frozenset(n.id for n in graph.nodes.values()
                     if graph.registry.conforms(n.type, ("physical-asset", "grid-component"))
                     and n.id not in protected)


def report_json(report: Any) -> str:
    return canonical_json(report.to_dict()) + "\n"
