"""Bundle merging and staged validation.

Stages V1 to V4 look at one object at a time; V5 to V7 need the whole bundle.
Every fault becomes a :class:`Finding`; nothing here raises on bad content.

Finding codes (closed catalog)::

    V1-STRUCT-ID           error    id is not ``type--uuid`` with a valid UUID
    V1-STRUCT-TIMESTAMP    error    created/modified missing or not YYYY-MM-DDTHH:MM:SS.mmmZ
    V1-STRUCT-SPEC         error    spec_version is not "2.1"
    V1-STRUCT-ORDER        error    modified precedes created
    V1-STRUCT-REL          error    relationship envelope properties missing or misplaced
    V2-REG-UNREGISTERED    warning  object type not in the registry
    V2-REG-REL-UNKNOWN     warning  relationship_type has no registered constraint
    V2-REG-REQUIRED        error    registered type lacks a required property
    V2-REG-VALUE           error    declared property value does not fit its semantic type
    V3-NAME-TYPE           error    type or relationship_type is not kebab-case
    V3-NAME-LABEL          warning  ``label`` property differs from the snake_case label
    V4-VOCAB-TERM          warning  value outside an open vocabulary
    V5-REF-DANGLING        error    reference does not resolve (warning with allow_dangling)
    V6-DOMAIN-SOURCE       error    relationship source outside the union class
    V6-DOMAIN-TARGET       error    relationship target outside the union class
    V7-CONN-ISOLATED       info     object takes part in no relationship
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .schema import SchemaRegistry, builtin_registry, is_kebab, to_label, value_conforms
from .stix import (
    RELATIONSHIP_KEYS, SPEC_VERSION, STANDARD_STIX_TYPES, UUID_RE, Bundle, StixId, StixObject, Timestamp,
    canonical_json,
)

__all__ = [
    "CODES",
    "Finding",
    "MergeConflict",
    "ValidationReport",
    "ValidatorConfig",
    "merge_bundles",
    "validate_bundle",
]

SEVERITIES = ("error", "warning", "info")

CODES = {
    "V1-STRUCT-ID": "error",
    "V1-STRUCT-TIMESTAMP": "error",
    "V1-STRUCT-SPEC": "error",
    "V1-STRUCT-ORDER": "error",
    "V1-STRUCT-REL": "error",
    "V2-REG-UNREGISTERED": "warning",
    "V2-REG-REL-UNKNOWN": "warning",
    "V2-REG-REQUIRED": "error",
    "V2-REG-VALUE": "error",
    "V3-NAME-TYPE": "error",
    "V3-NAME-LABEL": "warning",
    "V4-VOCAB-TERM": "warning",
    "V5-REF-DANGLING": "error",
    "V6-DOMAIN-SOURCE": "error",
    "V6-DOMAIN-TARGET": "error",
    "V7-CONN-ISOLATED": "info",
}

REFERENCE_KEYS = ("created_by_ref", "source_ref", "target_ref")


class MergeConflict(ValueError):
    """Two objects share id and modified timestamp but differ in content."""


@dataclass(frozen=True, order=True)
class Finding:
    object_id: str
    code: str
    path: str
    message: str
    severity: str = field(compare=False)

    def __post_init__(self) -> None:
        if self.code not in CODES:
            raise ValueError(f"unknown finding code {self.code!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"bad severity {self.severity!r}")
        if not self.message:
            raise ValueError("finding message must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "severity": self.severity, "object_id": self.object_id or None,
                "path": self.path, "message": self.message}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Finding":
        return cls(doc.get("object_id") or "", doc["code"], doc.get("path", ""), doc["message"], doc["severity"])

    def render(self) -> str:
        return f"{self.severity.upper()} {self.code} {self.object_id or '-'}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "findings", tuple(sorted(set(self.findings))))

    @property
    def counts(self) -> dict[str, int]:
        counts = dict.fromkeys(SEVERITIES, 0)
        for f in self.findings:
            counts[f.severity] += 1
        return counts

    @property
    def passed(self) -> bool:
        return self.counts["error"] == 0

    def codes(self, severity: str | None = None) -> set[str]:
        return {f.code for f in self.findings if severity is None or f.severity == severity}

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "counts": self.counts,
                "findings": [f.to_dict() for f in self.findings]}

    def to_json(self) -> str:
        return canonical_json(self.to_dict()) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ValidationReport":
        report = cls(tuple(Finding.from_dict(f) for f in doc["findings"]))
        if doc.get("passed", report.passed) != report.passed or doc.get("counts", report.counts) != report.counts:
            raise ValueError("report summary is inconsistent with its findings")
        return report

    def render_text(self) -> str:
        lines = [f.render() for f in self.findings]
        c = self.counts
        lines.append(f"{'PASSED' if self.passed else 'FAILED'}: "
                     f"{c['error']} error(s), {c['warning']} warning(s), {c['info']} info")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ValidatorConfig:
    allow_dangling: bool = False
    workers: int = 1


def _finding(obj_id: str, code: str, path: str, message: str, severity: str | None = None) -> Finding:
    return Finding(obj_id, code, path, message, severity or CODES[code])


# -- per-object stages -----------------------------------------------------------

def _stage_structural(obj: StixObject) -> list[Finding]:
    out = []
    oid = obj.id
    _, _, rest = oid.partition("--")
    if not UUID_RE.match(rest):
        out.append(_finding(oid, "V1-STRUCT-ID", "id", f"identifier {oid!r} does not carry a valid UUID"))
    for key in ("created", "modified"):
        value = obj.get(key)
        if not Timestamp.is_valid(value):
            what = "missing" if value is None else f"{value!r} is not YYYY-MM-DDTHH:MM:SS.mmmZ"
            out.append(_finding(oid, "V1-STRUCT-TIMESTAMP", key, f"{key} timestamp {what}"))
    if obj.spec_version != SPEC_VERSION:
        out.append(_finding(oid, "V1-STRUCT-SPEC", "spec_version",
                            f"spec_version must be {SPEC_VERSION!r}, got {obj.spec_version!r}"))
    if Timestamp.is_valid(obj.created) and Timestamp.is_valid(obj.modified) \
            and Timestamp.parse(obj.modified) < Timestamp.parse(obj.created):
        out.append(_finding(oid, "V1-STRUCT-ORDER", "modified", "modified precedes created"))
    present = RELATIONSHIP_KEYS & set(obj)
    if obj.is_relationship:
        for key in sorted(RELATIONSHIP_KEYS - present):
            out.append(_finding(oid, "V1-STRUCT-REL", key, f"relationship lacks {key}"))
        for key in ("source_ref", "target_ref"):
            if key in present and not StixId.is_valid(obj.get(key)):
                out.append(_finding(oid, "V1-STRUCT-REL", key, f"{key} {obj.get(key)!r} is not an identifier"))
    else:
        for key in sorted(present):
            out.append(_finding(oid, "V1-STRUCT-REL", key, f"{key} only belongs on relationship objects"))
    cbr = obj.get("created_by_ref")
    if cbr is not None and not StixId.is_valid(cbr):
        out.append(_finding(oid, "V1-STRUCT-REL", "created_by_ref", f"created_by_ref {cbr!r} is not an identifier"))
    return out


def _descriptor_name(obj: StixObject, registry: SchemaRegistry) -> str | None:
    """Registry entry governing an object's properties, if any."""
    if obj.is_relationship:
        rel = obj.relationship_type
        return rel if isinstance(rel, str) and rel in registry else "relationship"
    return obj.type if obj.type in registry else None


def _stage_registry(obj: StixObject, registry: SchemaRegistry) -> list[Finding]:
    out = []
    oid = obj.id
    if obj.type not in registry and obj.type not in STANDARD_STIX_TYPES:
        out.append(_finding(oid, "V2-REG-UNREGISTERED", "type", f"type {obj.type!r} is not registered"))
    rel = obj.relationship_type
    if obj.is_relationship and isinstance(rel, str) and rel not in registry.constraints:
        out.append(_finding(oid, "V2-REG-REL-UNKNOWN", "relationship_type",
                            f"relationship type {rel!r} has no registered constraint"))
    governing = _descriptor_name(obj, registry)
    if governing is None:
        return out
    for name, spec in sorted(registry.property_specs(governing).items()):
        if name not in obj:
            if spec.required:
                out.append(_finding(oid, "V2-REG-REQUIRED", name, f"{governing} requires property {name!r}"))
            continue
        if not value_conforms(spec.semantic_type, obj.get(name)):
            out.append(_finding(oid, "V2-REG-VALUE", name,
                                f"property {name!r} is not a valid {spec.semantic_type}"))
    return out


def _stage_naming(obj: StixObject) -> list[Finding]:
    out = []
    oid = obj.id
    if not is_kebab(obj.type):
        out.append(_finding(oid, "V3-NAME-TYPE", "type", f"type {obj.type!r} is not kebab-case"))
    rel = obj.relationship_type
    if obj.is_relationship and rel is not None and not is_kebab(rel):
        out.append(_finding(oid, "V3-NAME-TYPE", "relationship_type",
                            f"relationship type {rel!r} is not kebab-case"))
    if "label" in obj:
        named = rel if obj.is_relationship else obj.type
        expected = to_label(named) if is_kebab(named) else None
        if obj.get("label") != expected:
            out.append(_finding(oid, "V3-NAME-LABEL", "label",
                                f"label {obj.get('label')!r} should be {expected!r}"))
    return out


def _stage_vocabulary(obj: StixObject, registry: SchemaRegistry) -> list[Finding]:
    governing = _descriptor_name(obj, registry)
    if governing is None:
        return []
    out = []
    for name, spec in sorted(registry.property_specs(governing).items()):
        vocab_name = spec.vocabulary
        if vocab_name is None or name not in obj:
            continue
        vocab = registry.vocabulary(vocab_name)
        value = obj.get(name)
        values = value if isinstance(value, list) else [value]
        for i, v in enumerate(values):
            if isinstance(v, str) and v not in vocab:
                path = f"{name}[{i}]" if isinstance(value, list) else name
                out.append(_finding(obj.id, "V4-VOCAB-TERM", path,
                                    f"{v!r} is not a term of open vocabulary {vocab_name!r}"))
    return out


def _object_findings(obj: StixObject, registry: SchemaRegistry) -> list[Finding]:
    return (_stage_structural(obj) + _stage_registry(obj, registry)
            + _stage_naming(obj) + _stage_vocabulary(obj, registry))


# -- whole-bundle stages ---------------------------------------------------------

def _stage_referential(bundle: Bundle, known: Mapping[str, StixObject], config: ValidatorConfig) -> list[Finding]:
    severity = "warning" if config.allow_dangling else "error"
    out = []
    for obj in bundle.objects:
        for key in REFERENCE_KEYS:
            ref = obj.get(key)
            if isinstance(ref, str) and StixId.is_valid(ref) and ref not in known:
                out.append(_finding(obj.id, "V5-REF-DANGLING", key, f"{key} {ref} does not resolve", severity))
    return out


def _stage_domain_range(latest: Mapping[str, StixObject], registry: SchemaRegistry) -> list[Finding]:
    out = []
    for obj in latest.values():
        if not obj.is_relationship:
            continue
        constraint = registry.constraints.get(obj.relationship_type)  # type: ignore[arg-type]
        if constraint is None:
            continue
        for key, union, code in (("source_ref", constraint.allowed_sources, "V6-DOMAIN-SOURCE"),
                                 ("target_ref", constraint.allowed_targets, "V6-DOMAIN-TARGET")):
            end = latest.get(obj.get(key))  # type: ignore[arg-type]
            if end is None:
                continue
            end_type = end.type
            if not registry.conforms(end_type, union):
                out.append(_finding(obj.id, code, key,
                                    f"{constraint.relationship_type} does not allow {end_type!r} as "
                                    f"{'source' if key == 'source_ref' else 'target'} "
                                    f"(allowed: {', '.join(sorted(union))})"))
    return out


def _stage_connectivity(latest: Mapping[str, StixObject], registry: SchemaRegistry) -> list[Finding]:
    linked: set[str] = set()
    for obj in latest.values():
        if obj.is_relationship:
            linked.update(r for r in (obj.source_ref, obj.target_ref) if isinstance(r, str))
    out = []
    for oid, obj in latest.items():
        if obj.is_relationship or registry.is_context_type(obj.type) or oid in linked:
            continue
        out.append(_finding(oid, "V7-CONN-ISOLATED", "", f"{obj.type} takes part in no relationship"))
    return out


def validate_bundle(bundle: Bundle, registry: SchemaRegistry | None = None,
                    config: ValidatorConfig | None = None) -> ValidationReport:
    registry = registry or builtin_registry()
    config = config or ValidatorConfig()
    if config.workers > 1 and len(bundle.objects) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            per_object = list(pool.map(lambda o: _object_findings(o, registry), bundle.objects))
    else:
        per_object = [_object_findings(o, registry) for o in bundle.objects]
    findings = [f for chunk in per_object for f in chunk]
    latest = bundle.latest()
    findings += _stage_referential(bundle, latest, config)
    findings += _stage_domain_range(latest, registry)
    findings += _stage_connectivity(latest, registry)
    return ValidationReport(tuple(findings))


# -- merging ------------------------------------------------------------------------

def _modified_key(obj: StixObject) -> tuple[int, Any]:
    if Timestamp.is_valid(obj.modified):
        return (1, Timestamp.parse(obj.modified))
    return (0, json.dumps(obj.modified))


def merge_bundles(bundles: Iterable[Bundle]) -> Bundle:
    """Union of objects; for a shared id the latest ``modified`` wins.

    The result keeps the first bundle's id. Equal ``modified`` with different
    content raises :class:`MergeConflict`.
    """
    bundles = list(bundles)
    if not bundles:
        raise ValueError("merge_bundles needs at least one bundle")
    chosen: dict[str, StixObject] = {}
    for bundle in bundles:
        for obj in bundle.objects:
            held = chosen.get(obj.id)
            if held is None:
                chosen[obj.id] = obj
                continue
            a, b = _modified_key(held), _modified_key(obj)
            if a == b:
                if held != obj:
                    raise MergeConflict(f"{obj.id} has conflicting content at modified {obj.modified!r}")
            elif b > a:
                chosen[obj.id] = obj
    return Bundle(chosen.values(), id=bundles[0].id, extra=bundles[0].extra)
