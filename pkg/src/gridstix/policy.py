"""Zero Trust policy decision point.

Rules come from ``access-policy`` / ``security-policy`` objects. A rule applies
to a request when its target, privilege and operational-state conditions
match. Each applicable rule may then fire with its effect:

* deny fires whenever it applies;
* quarantine fires when it is set ``on-anomaly`` and the request is flagged;
* step-up-auth fires when the request has too few factors or, if required,
  unverified firmware;
* permit fires when the request satisfies all of the rule's conditions, and
  asks for step-up-auth when the authentication or firmware conditions fail.

Fired outcomes combine by severity (deny > quarantine > step-up-auth > permit).
Nothing fired means deny.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .graph import ThreatGraph
from .stix import Bundle, StixObject, Timestamp

__all__ = [
    "EFFECTS",
    "FIRMWARE_STATES",
    "PRIVILEGES",
    "AccessRequest",
    "ContextConflictError",
    "PolicyDecision",
    "PolicyDecisionPoint",
    "PolicyError",
    "PolicyRule",
    "RuleConditions",
    "UnknownContext",
    "UnknownTarget",
    "applicable_rules",
    "evaluate",
    "rules_from_bundle",
]

PRIVILEGES = ("read", "operate", "configure", "firmware-update")
FIRMWARE_STATES = ("verified", "unverified", "failed")
# Most severe first.
EFFECTS = ("deny", "quarantine", "step-up-auth", "permit")
SEVERITY = {effect: rank for rank, effect in enumerate(reversed(EFFECTS))}
POLICY_TYPES = ("grid-policy",)


class PolicyError(ValueError):
    """A policy object or request is malformed."""


class UnknownTarget(LookupError):
    pass


class UnknownContext(LookupError):
    pass


class ContextConflictError(ValueError):
    """Active operational contexts disagree on the operational state."""


@dataclass(frozen=True)
class AccessRequest:
    subject: str
    target: str
    privilege: str
    auth_factors: int = 0
    firmware_integrity: str = "unverified"
    anomaly_flag: bool = False
    at: str | None = None

    def __post_init__(self) -> None:
        if self.privilege not in PRIVILEGES:
            raise PolicyError(f"unknown privilege {self.privilege!r}")
        if isinstance(self.auth_factors, bool) or not isinstance(self.auth_factors, int) or self.auth_factors < 0:
            raise PolicyError("auth_factors must be a non-negative integer")
        if self.firmware_integrity not in FIRMWARE_STATES:
            raise PolicyError(f"unknown firmware integrity {self.firmware_integrity!r}")
        if self.at is not None and not Timestamp.is_valid(self.at):
            raise PolicyError(f"bad request timestamp {self.at!r}")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "AccessRequest":
        try:
            return cls(doc["subject"], doc["target"], doc["privilege"], doc.get("auth_factors", 0),
                       doc.get("firmware_integrity", "unverified"), bool(doc.get("anomaly_flag", False)),
                       doc.get("at"))
        except KeyError as exc:
            raise PolicyError(f"request lacks {exc.args[0]!r}") from None

    def to_dict(self) -> dict[str, Any]:
        return {"subject": self.subject, "target": self.target, "privilege": self.privilege,
                "auth_factors": self.auth_factors, "firmware_integrity": self.firmware_integrity,
                "anomaly_flag": self.anomaly_flag, "at": self.at}


@dataclass(frozen=True)
class RuleConditions:
    operational_states: frozenset[str] | None = None
    min_auth_factors: int | None = None
    require_firmware_verified: bool = False
    on_anomaly: bool = False

    def credentials_met(self, request: AccessRequest) -> bool:
        if self.min_auth_factors is not None and request.auth_factors < self.min_auth_factors:
            return False
        return not (self.require_firmware_verified and request.firmware_integrity != "verified")


@dataclass(frozen=True)
class PolicyRule:
    id: str
    effect: str
    privileges: frozenset[str]
    applies_to_types: frozenset[str] = frozenset()
    applies_to_ids: frozenset[str] = frozenset()
    conditions: RuleConditions = field(default_factory=RuleConditions)

    def __post_init__(self) -> None:
        if self.effect not in EFFECTS:
            raise PolicyError(f"{self.id}: unknown effect {self.effect!r}")
        if not self.privileges or not self.privileges <= set(PRIVILEGES):
            raise PolicyError(f"{self.id}: privileges must be a non-empty subset of {PRIVILEGES}")
        if not self.applies_to_types and not self.applies_to_ids:
            raise PolicyError(f"{self.id}: needs applies-to-types or applies-to-refs")

    @classmethod
    def from_object(cls, obj: StixObject) -> "PolicyRule":
        props = obj.properties

        def listed(key: str) -> frozenset[str]:
            value = props.get(key, [])
            if not isinstance(value, list):
                raise PolicyError(f"{obj.id}: {key} must be a list")
            return frozenset(value)

        states = props.get("operational-states")
        min_auth = props.get("min-auth-factors")
        if min_auth is not None and (isinstance(min_auth, bool) or not isinstance(min_auth, int)):
            raise PolicyError(f"{obj.id}: min-auth-factors must be an integer")
        conditions = RuleConditions(
            operational_states=None if states is None else listed("operational-states"),
            min_auth_factors=min_auth,
            require_firmware_verified=bool(props.get("require-firmware-verified", False)),
            on_anomaly=bool(props.get("on-anomaly", False)),
        )
        if "effect" not in props:
            raise PolicyError(f"{obj.id}: policy has no effect")
        return cls(obj.id, props["effect"], listed("privileges"), listed("applies-to-types"),
                   listed("applies-to-refs"), conditions)

    def outcome(self, request: AccessRequest) -> str | None:
        """Effect this rule contributes for a request it applies to, or None."""
        c = self.conditions
        if self.effect == "deny":
            return "deny"
        if self.effect == "quarantine":
            return "quarantine" if c.on_anomaly and request.anomaly_flag else None
        if self.effect == "step-up-auth":
            return None if c.credentials_met(request) else "step-up-auth"
        if not c.credentials_met(request):
            return "step-up-auth"
        if c.on_anomaly and request.anomaly_flag:
            return None
        return "permit"


@dataclass(frozen=True)
class PolicyDecision:
    outcome: str
    matched_rules: tuple[str, ...] = ()
    rationale: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"outcome": self.outcome, "matched_rules": list(self.matched_rules),
                "rationale": list(self.rationale)}


def rules_from_bundle(bundle: Bundle, graph: ThreatGraph | None = None) -> list[PolicyRule]:
    """Every policy object in the bundle as a rule."""
    registry = graph.registry if graph is not None else None
    if registry is None:
        from .schema import builtin_registry
        registry = builtin_registry()
    return [PolicyRule.from_object(o) for o in bundle.latest().values()
            if registry.conforms(o.type, POLICY_TYPES)]


def _active_state(graph: ThreatGraph, contexts: Iterable[str]) -> str | None:
    states = set()
    for cid in sorted(set(contexts)):
        node = graph.nodes.get(cid)
        if node is None:
            raise UnknownContext(cid)
        if not graph.registry.is_context_type(node.type):
            raise UnknownContext(f"{cid} is a {node.type}, not a context object")
        if graph.registry.conforms(node.type, ("operational-context",)):
            states.add(node.properties.get("operational-state"))
    if len(states) > 1:
        raise ContextConflictError(f"conflicting operational states {sorted(map(str, states))}")
    return next(iter(states), None)


def _target_type(request: AccessRequest, graph: ThreatGraph) -> str:
    node = graph.nodes.get(request.target)
    if node is None:
        raise UnknownTarget(request.target)
    return node.type


def _applies(rule: PolicyRule, request: AccessRequest, target_ancestors: frozenset[str],
             state: str | None) -> bool:
    if request.privilege not in rule.privileges:
        return False
    if request.target not in rule.applies_to_ids and target_ancestors.isdisjoint(rule.applies_to_types):
        return False
    states = rule.conditions.operational_states
    return states is None or state in states


def applicable_rules(request: AccessRequest, rules: Iterable[PolicyRule], graph: ThreatGraph,
                     contexts: Iterable[str] = ()) -> list[PolicyRule]:
    return PolicyDecisionPoint(graph, contexts).applicable(request, rules)


class PolicyDecisionPoint:
    """Decides requests against one graph under a fixed set of active contexts.

    Context resolution happens once, so a bound decision point is the cheap way
    to evaluate many requests.
    """

    def __init__(self, graph: ThreatGraph, contexts: Iterable[str] = ()):
        self.graph = graph
        self.state = _active_state(graph, contexts)
        self._ancestors: dict[str, frozenset[str]] = {}

    def _target_ancestors(self, request: AccessRequest) -> frozenset[str]:
        cached = self._ancestors.get(request.target)
        if cached is None:
            cached = self._ancestors[request.target] = self.graph.registry.ancestor_set(
                _target_type(request, self.graph))
        return cached

    def applicable(self, request: AccessRequest, rules: Iterable[PolicyRule]) -> list[PolicyRule]:
        ancestors = self._target_ancestors(request)
        return [r for r in rules if _applies(r, request, ancestors, self.state)]

    def decide(self, request: AccessRequest, rules: Iterable[PolicyRule]) -> PolicyDecision:
        ancestors = self._target_ancestors(request)
        fired: list[tuple[str, str]] = []
        for rule in rules:
            if _applies(rule, request, ancestors, self.state):
                effect = rule.outcome(request)
                if effect is not None:
                    fired.append((rule.id, effect))
        if not fired:
            return PolicyDecision("deny", (), ("no rule fired: default deny",))
        fired.sort()
        outcome = max((effect for _, effect in fired), key=SEVERITY.__getitem__)
        return PolicyDecision(outcome, tuple(rid for rid, _ in fired),
                              tuple(f"{rid}: {effect}" for rid, effect in fired))


def evaluate(request: AccessRequest, rules: Iterable[PolicyRule], graph: ThreatGraph,
             contexts: Iterable[str] = ()) -> PolicyDecision:
    """Combined outcome of ``rules`` for ``request``; deny when no rule fires."""
    return PolicyDecisionPoint(graph, contexts).decide(request, rules)
