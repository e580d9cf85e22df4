"""Grid type registry: hierarchy, property requirements, relationship union classes, vocabularies.

The built-in registry is loaded from ``data/registry.json``; a registry document
with the same layout can override or extend it (see :func:`load_registry`).
"""

from __future__ import annotations

import enum
import functools
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from .stix import StixId, Timestamp, TokenError, loads_document

__all__ = [
    "MODULES",
    "IMPACT_DIRECTIONS",
    "PropertySpec",
    "RegistryError",
    "RelationshipConstraint",
    "SchemaRegistry",
    "TypeDescriptor",
    "UnknownRelationship",
    "UnknownType",
    "UnknownVocabulary",
    "VocabResult",
    "Vocabulary",
    "builtin_registry",
    "is_kebab",
    "is_subtype",
    "load_registry",
    "relationship_constraint",
    "to_label",
    "vocab_check",
]

MODULES = (
    "assets",
    "components",
    "relationships",
    "attack-patterns",
    "policies",
    "events-observables",
    "nuclear-safeguards",
    "operational-contexts",
    "environmental-contexts",
    "cyber-contexts",
    "physical-contexts",
    "vocabularies",
)
CONTEXT_MODULES = frozenset(m for m in MODULES if m.endswith("-contexts"))
STIX_BASES = frozenset({
    "infrastructure", "software", "attack-pattern", "relationship",
    "observed-data", "identity", "grouping", "none",
})
IMPACT_DIRECTIONS = ("forward", "reverse", "none")
SCALAR_TYPES = frozenset({
    "string", "integer", "number", "fraction", "boolean", "timestamp", "identifier", "type-name",
})

KEBAB_RE = re.compile(r"^[a-z][a-z0-9]*(?:-[a-z0-9]+)*$")


class RegistryError(ValueError):
    """The registry document is inconsistent."""


class UnknownType(LookupError):
    pass


class UnknownRelationship(LookupError):
    pass


class UnknownVocabulary(LookupError):
    pass


class VocabResult(str, enum.Enum):
    MEMBER = "member"
    NON_MEMBER_OPEN = "non-member-open"


def is_kebab(name: object) -> bool:
    return isinstance(name, str) and KEBAB_RE.match(name) is not None


def to_label(type_name: str) -> str:
    """``feeds-power-to`` -> ``feeds_power_to``."""
    if not is_kebab(type_name):
        raise TokenError(f"{type_name!r} is not a kebab-case token")
    return type_name.replace("-", "_")


def _check_semantic_type(semtype: str) -> None:
    inner = semtype
    if inner.startswith("list:"):
        inner = inner[len("list:"):]
    if inner in SCALAR_TYPES:
        return
    if inner.startswith("vocab:") and is_kebab(inner[len("vocab:"):]):
        return
    raise RegistryError(f"unknown semantic type {semtype!r}")


def vocabulary_of(semtype: str) -> str | None:
    """Vocabulary referenced by a semantic type (``vocab:x`` or ``list:vocab:x``)."""
    inner = semtype[len("list:"):] if semtype.startswith("list:") else semtype
    return inner[len("vocab:"):] if inner.startswith("vocab:") else None


def value_conforms(semtype: str, value: Any) -> bool:
    """Shape check of a property value against its semantic type (vocabulary membership excluded)."""
    if semtype.startswith("list:"):
        inner = semtype[len("list:"):]
        return isinstance(value, list) and all(value_conforms(inner, v) for v in value)
    if semtype == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if semtype == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if semtype == "fraction":
        return value_conforms("number", value) and 0 <= value <= 1
    if semtype == "boolean":
        return isinstance(value, bool)
    if semtype == "timestamp":
        return Timestamp.is_valid(value)
    if semtype == "identifier":
        return StixId.is_valid(value)
    if semtype == "type-name":
        return is_kebab(value)
    return isinstance(value, str)  # string, vocab:*


@dataclass(frozen=True)
class PropertySpec:
    name: str
    semantic_type: str
    required: bool = False

    @property
    def vocabulary(self) -> str | None:
        return vocabulary_of(self.semantic_type)


@dataclass(frozen=True)
class TypeDescriptor:
    type_name: str
    module: str
    stix_base: str
    parent: str | None = None
    required_properties: tuple[PropertySpec, ...] = ()
    optional_properties: tuple[PropertySpec, ...] = ()
    description: str = ""

    @property
    def label(self) -> str:
        return to_label(self.type_name)

    @property
    def properties(self) -> tuple[PropertySpec, ...]:
        return self.required_properties + self.optional_properties

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "TypeDescriptor":
        try:
            name = doc["type_name"]
            required = tuple(PropertySpec(k, v, True) for k, v in doc.get("required", {}).items())
            optional = tuple(PropertySpec(k, v, False) for k, v in doc.get("optional", {}).items())
            descriptor = cls(name, doc["module"], doc["stix_base"], doc.get("parent"),
                             required, optional, doc.get("description", ""))
        except (KeyError, AttributeError, TypeError) as exc:
            raise RegistryError(f"malformed descriptor {doc!r}: {exc}") from None
        if "label" in doc and doc["label"] != descriptor.label:
            raise RegistryError(f"label {doc['label']!r} of {name} must be {descriptor.label!r}")
        return descriptor

    def to_dict(self) -> dict[str, Any]:
        return {
            "type_name": self.type_name,
            "label": self.label,
            "module": self.module,
            "parent": self.parent,
            "stix_base": self.stix_base,
            "required": {p.name: p.semantic_type for p in self.required_properties},
            "optional": {p.name: p.semantic_type for p in self.optional_properties},
            "description": self.description,
        }


@dataclass(frozen=True)
class RelationshipConstraint:
    relationship_type: str
    allowed_sources: frozenset[str]
    allowed_targets: frozenset[str]
    impact_direction: str = "none"
    default_amplification: float = 0.0

    def __post_init__(self) -> None:
        if not self.allowed_sources or not self.allowed_targets:
            raise RegistryError(f"{self.relationship_type}: union classes must be non-empty")
        if self.impact_direction not in IMPACT_DIRECTIONS:
            raise RegistryError(f"{self.relationship_type}: bad impact direction {self.impact_direction!r}")
        if not 0 <= self.default_amplification <= 1:
            raise RegistryError(f"{self.relationship_type}: amplification must lie in [0, 1]")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RelationshipConstraint":
        try:
            return cls(doc["relationship_type"], frozenset(doc["allowed_sources"]),
                       frozenset(doc["allowed_targets"]), doc.get("impact_direction", "none"),
                       float(doc.get("default_amplification", 0.0)))
        except (KeyError, TypeError) as exc:
            raise RegistryError(f"malformed constraint {doc!r}: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "relationship_type": self.relationship_type,
            "allowed_sources": sorted(self.allowed_sources),
            "allowed_targets": sorted(self.allowed_targets),
            "impact_direction": self.impact_direction,
            "default_amplification": self.default_amplification,
        }


@dataclass(frozen=True)
class Vocabulary:
    name: str
    terms: tuple[str, ...]
    open: bool = True

    def __post_init__(self) -> None:
        if len(set(self.terms)) != len(self.terms):
            raise RegistryError(f"vocabulary {self.name} has duplicate terms")
        if any(not isinstance(t, str) or not t for t in self.terms):
            raise RegistryError(f"vocabulary {self.name} has empty or non-string terms")

    def __contains__(self, value: object) -> bool:
        return value in self.terms

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "terms": list(self.terms), "open": self.open}


@dataclass(frozen=True)
class SchemaRegistry:
    descriptors: Mapping[str, TypeDescriptor]
    constraints: Mapping[str, RelationshipConstraint]
    vocabularies: Mapping[str, Vocabulary]
    _ancestors: Mapping[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)
    _ancestor_sets: Mapping[str, frozenset[str]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        for attr in ("descriptors", "constraints", "vocabularies"):
            object.__setattr__(self, attr, MappingProxyType(dict(getattr(self, attr))))
        object.__setattr__(self, "_ancestors", MappingProxyType(self._self_validate()))
        object.__setattr__(self, "_ancestor_sets",
                           MappingProxyType({k: frozenset(v) for k, v in self._ancestors.items()}))

    def _self_validate(self) -> dict[str, tuple[str, ...]]:
        labels: dict[str, str] = {}
        for name, desc in self.descriptors.items():
            if name != desc.type_name:
                raise RegistryError(f"descriptor key {name!r} != type_name {desc.type_name!r}")
            if not is_kebab(name):
                raise RegistryError(f"type name {name!r} is not kebab-case")
            if desc.module not in MODULES:
                raise RegistryError(f"{name}: unknown module {desc.module!r}")
            if desc.stix_base not in STIX_BASES:
                raise RegistryError(f"{name}: unknown stix_base {desc.stix_base!r}")
            if desc.parent is not None and desc.parent not in self.descriptors:
                raise RegistryError(f"{name}: parent {desc.parent!r} is not registered")
            if desc.label in labels:
                raise RegistryError(f"{name} and {labels[desc.label]} share label {desc.label!r}")
            labels[desc.label] = name
            seen: set[str] = set()
            for prop in desc.properties:
                _check_semantic_type(prop.semantic_type)
                if prop.name in seen:
                    raise RegistryError(f"{name}: property {prop.name!r} declared twice")
                seen.add(prop.name)
                vocab = prop.vocabulary
                if vocab is not None and vocab not in self.vocabularies:
                    raise RegistryError(f"{name}.{prop.name}: vocabulary {vocab!r} is not registered")

        ancestors: dict[str, tuple[str, ...]] = {}
        for name in self.descriptors:
            chain = [name]
            while (parent := self.descriptors[chain[-1]].parent) is not None:
                if parent in chain:
                    raise RegistryError(f"parent cycle through {' -> '.join(chain + [parent])}")
                chain.append(parent)
            ancestors[name] = tuple(chain)

        for rel, con in self.constraints.items():
            if rel != con.relationship_type:
                raise RegistryError(f"constraint key {rel!r} != {con.relationship_type!r}")
            if not is_kebab(rel):
                raise RegistryError(f"relationship type {rel!r} is not kebab-case")
            for member in con.allowed_sources | con.allowed_targets:
                if member not in self.descriptors:
                    raise RegistryError(f"{rel}: union member {member!r} is not registered")
        for name, vocab in self.vocabularies.items():
            if name != vocab.name or not is_kebab(name):
                raise RegistryError(f"bad vocabulary name {name!r}")
        return ancestors

    # -- queries ---------------------------------------------------------

    def __contains__(self, type_name: object) -> bool:
        return type_name in self.descriptors

    def __len__(self) -> int:
        return len(self.descriptors)

    def lookup(self, type_name: str) -> TypeDescriptor | None:
        return self.descriptors.get(type_name)

    def descriptor(self, type_name: str) -> TypeDescriptor:
        try:
            return self.descriptors[type_name]
        except KeyError:
            raise UnknownType(type_name) from None

    def ancestors(self, type_name: str) -> tuple[str, ...]:
        """``type_name`` followed by its parent chain up to the root."""
        try:
            return self._ancestors[type_name]
        except KeyError:
            raise UnknownType(type_name) from None

    def ancestor_set(self, type_name: str) -> frozenset[str]:
        try:
            return self._ancestor_sets[type_name]
        except KeyError:
            raise UnknownType(type_name) from None

    def is_subtype(self, a: str, b: str) -> bool:
        if b not in self.descriptors:
            raise UnknownType(b)
        return b in self.ancestors(a)

    def conforms(self, type_name: str, union: Iterable[str]) -> bool:
        """True when ``type_name`` is registered and a subtype of some union member."""
        chain = self._ancestor_sets.get(type_name)
        return chain is not None and not chain.isdisjoint(union)

    def subtypes(self, type_name: str) -> list[str]:
        self.descriptor(type_name)
        return sorted(n for n, chain in self._ancestors.items() if type_name in chain)

    def module_of(self, type_name: str) -> str | None:
        desc = self.descriptors.get(type_name)
        return desc.module if desc else None

    def is_context_type(self, type_name: str) -> bool:
        return self.module_of(type_name) in CONTEXT_MODULES

    def constraint(self, rel_type: str) -> RelationshipConstraint:
        try:
            return self.constraints[rel_type]
        except KeyError:
            raise UnknownRelationship(rel_type) from None

    def vocabulary(self, name: str) -> Vocabulary:
        try:
            return self.vocabularies[name]
        except KeyError:
            raise UnknownVocabulary(name) from None

    def property_specs(self, type_name: str) -> dict[str, PropertySpec]:
        """All properties declared on the type or its ancestors; nearest declaration wins."""
        specs: dict[str, PropertySpec] = {}
        for ancestor in reversed(self.ancestors(type_name)):
            for prop in self.descriptors[ancestor].properties:
                prior = specs.get(prop.name)
                if prior is not None and prior.required and not prop.required:
                    prop = PropertySpec(prop.name, prop.semantic_type, True)
                specs[prop.name] = prop
        return specs

    # -- serialization ---------------------------------------------------

    def to_document(self) -> dict[str, Any]:
        return {
            "type": "grid-stix-registry",
            "descriptors": [self.descriptors[n].to_dict() for n in sorted(self.descriptors)],
            "constraints": [self.constraints[n].to_dict() for n in sorted(self.constraints)],
            "vocabularies": [self.vocabularies[n].to_dict() for n in sorted(self.vocabularies)],
        }


def registry_from_document(doc: Mapping[str, Any], base: SchemaRegistry | None = None) -> SchemaRegistry:
    """Build a registry from a document; entries replace same-named entries of ``base``."""
    if not isinstance(doc, Mapping):
        raise RegistryError("registry document must be an object")
    if doc.get("type", "grid-stix-registry") != "grid-stix-registry":
        raise RegistryError(f"unexpected document type {doc.get('type')!r}")
    descriptors = dict(base.descriptors) if base else {}
    constraints = dict(base.constraints) if base else {}
    vocabularies = dict(base.vocabularies) if base else {}
    for entry in doc.get("descriptors", []):
        desc = TypeDescriptor.from_dict(entry)
        descriptors[desc.type_name] = desc
    for entry in doc.get("constraints", []):
        con = RelationshipConstraint.from_dict(entry)
        constraints[con.relationship_type] = con
    for entry in doc.get("vocabularies", []):
        try:
            vocab = Vocabulary(entry["name"], tuple(entry["terms"]), bool(entry.get("open", True)))
        except (KeyError, TypeError) as exc:
            raise RegistryError(f"malformed vocabulary {entry!r}: {exc}") from None
        vocabularies[vocab.name] = vocab
    return SchemaRegistry(descriptors, constraints, vocabularies)


@functools.lru_cache(maxsize=1)
def builtin_registry() -> SchemaRegistry:
    text = resources.files("gridstix").joinpath("data/registry.json").read_text(encoding="utf-8")
    return registry_from_document(json.loads(text))


def load_registry(source: str | Path | Mapping[str, Any], base: SchemaRegistry | None = None) -> SchemaRegistry:
    """Load an override document (path or parsed mapping) on top of ``base`` (builtin by default)."""
    if not isinstance(source, Mapping):
        source = loads_document(Path(source).read_bytes())
    return registry_from_document(source, builtin_registry() if base is None else base)


def relationship_constraint(registry: SchemaRegistry, rel_type: str) -> RelationshipConstraint:
    return registry.constraint(rel_type)


def is_subtype(registry: SchemaRegistry, a: str, b: str) -> bool:
    return registry.is_subtype(a, b)


def vocab_check(registry: SchemaRegistry, vocab: str, value: str) -> VocabResult:
    if value in registry.vocabulary(vocab):
        return VocabResult.MEMBER
    return VocabResult.NON_MEMBER_OPEN
