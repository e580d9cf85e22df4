"""Keyed pseudonymization for sharing bundles across organisations.

Pseudonym ids are ``HMAC-SHA256(key, original id)``, truncated to 128 bits and
stamped with UUID version-4/variant bits, under the original object type. The
derivation is frozen: test vectors live in ``tests/fixtures/pseudonym_vectors.json``.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import uuid
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from .schema import SchemaRegistry, builtin_registry
from .stix import Bundle, StixObject, id_prefix, loads_document
from .validator import ValidatorConfig, validate_bundle

__all__ = [
    "DEFAULT_STRIP",
    "ProfileConflictError",
    "SharingProfile",
    "ValidationPreconditionError",
    "find_divergence",
    "pseudonym_id",
    "redact_bundle",
    "verify_topology",
]

log = logging.getLogger(__name__)

DEFAULT_STRIP = frozenset({"latitude", "longitude", "serial-number", "firmware-version", "street-address"})


class ProfileConflictError(ValueError):
    pass


class ValidationPreconditionError(ValueError):
    def __init__(self, report):
        super().__init__("bundle does not validate: "
                         + "; ".join(f.render() for f in report.findings if f.severity == "error"))
        self.report = report


def _is_ref_key(key: str) -> bool:
    return key.endswith(("_ref", "_refs", "-ref", "-refs"))


def default_pseudonymize_types(registry: SchemaRegistry) -> frozenset[str]:
    assets = set(registry.subtypes("physical-asset")) | set(registry.subtypes("ot-device"))
    return frozenset(assets | set(registry.subtypes("supplier")))


def default_preserve_types(registry: SchemaRegistry) -> frozenset[str]:
    return frozenset(set(registry.subtypes("grid-attack-pattern")) | set(registry.subtypes("grid-vocabulary"))
                     | {"attack-pattern"})


@dataclass(frozen=True)
class SharingProfile:
    strip_properties: frozenset[str]
    pseudonymize_types: frozenset[str]
    preserve_types: frozenset[str]

    def __post_init__(self) -> None:
        overlap = self.pseudonymize_types & self.preserve_types
        if overlap:
            raise ProfileConflictError(f"types both pseudonymized and preserved: {sorted(overlap)}")

    @classmethod
    def default(cls, registry: SchemaRegistry | None = None) -> "SharingProfile":
        registry = registry or builtin_registry()
        return cls(DEFAULT_STRIP, default_pseudonymize_types(registry), default_preserve_types(registry))

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], registry: SchemaRegistry | None = None) -> "SharingProfile":
        base = cls.default(registry)
        return cls(
            frozenset(doc.get("strip_properties", base.strip_properties)),
            frozenset(doc.get("pseudonymize_types", base.pseudonymize_types)),
            frozenset(doc.get("preserve_types", base.preserve_types)),
        )

    @classmethod
    def load(cls, path: str, registry: SchemaRegistry | None = None) -> "SharingProfile":
        with open(path, "rb") as fh:
            return cls.from_dict(loads_document(fh.read()), registry)

    def to_dict(self) -> dict[str, Any]:
        return {"strip_properties": sorted(self.strip_properties),
                "pseudonymize_types": sorted(self.pseudonymize_types),
                "preserve_types": sorted(self.preserve_types)}


def pseudonym_id(key: bytes, original_id: str) -> str:
    digest = hmac.new(key, original_id.encode("utf-8"), hashlib.sha256).digest()
    return f"{id_prefix(original_id)}--{uuid.UUID(bytes=digest[:16], version=4)}"


def _rewrite(value: Any, mapping: Mapping[str, str], key: str = "") -> Any:
    if isinstance(value, dict):
        return {k: _rewrite(v, mapping, k) for k, v in value.items()}
    if _is_ref_key(key):
        if isinstance(value, str):
            return mapping.get(value, value)
        if isinstance(value, list):
            return [mapping.get(v, v) if isinstance(v, str) else v for v in value]
    if isinstance(value, list):
        return [_rewrite(v, mapping) for v in value]
    return value


def redact_bundle(bundle: Bundle, profile: SharingProfile, key: bytes,
                  registry: SchemaRegistry | None = None,
                  config: ValidatorConfig | None = None) -> tuple[Bundle, dict[str, str]]:
    """Return the redacted bundle and the original-to-pseudonym id map.

    The map is for the caller only; nothing in the output links back to it.
    """
    registry = registry or builtin_registry()
    report = validate_bundle(bundle, registry, config)
    if not report.passed:
        raise ValidationPreconditionError(report)
    if not key:
        raise ValueError("redaction key must be non-empty")

    mapping = {o.id: pseudonym_id(key, o.id) for o in bundle.objects if o.type in profile.pseudonymize_types}
    rank = {pid: k for k, pid in enumerate(sorted(set(mapping.values())), start=1)}

    out: list[StixObject] = []
    for obj in bundle.objects:
        data = obj.to_dict()
        if obj.type not in profile.preserve_types:
            for prop in profile.strip_properties:
                data.pop(prop, None)
        data = _rewrite(data, mapping)
        if obj.id in mapping:
            data["id"] = mapping[obj.id]
            if "name" in data:
                data["name"] = f"asset-{rank[data['id']]}"
        out.append(StixObject(data))
    redacted = Bundle(out, id=pseudonym_id(key, bundle.id), extra=bundle.extra)
    return redacted, mapping


def _edge_multiset(bundle: Bundle, mapping: Mapping[str, str]) -> list[tuple[str, str, str]]:
    return sorted((str(o.relationship_type), mapping.get(o.source_ref, o.source_ref),
                   mapping.get(o.target_ref, o.target_ref))
                  for o in bundle.latest().values() if o.is_relationship)


def find_divergence(original: Bundle, redacted: Bundle, mapping: Mapping[str, str],
                    strip_properties: Iterable[str] = DEFAULT_STRIP) -> str | None:
    """First difference between ``original`` (mapped through ``mapping``) and ``redacted``."""
    strip = frozenset(strip_properties)
    if len(original.objects) != len(redacted.objects):
        return f"object count {len(original.objects)} != {len(redacted.objects)}"
    by_key = {o.sort_key: o for o in redacted.objects}
    for obj in original.objects:
        new_id = mapping.get(obj.id, obj.id)
        twin = by_key.get((new_id, obj.sort_key[1]))
        if twin is None:
            return f"{obj.id} has no counterpart {new_id}"
        if twin.type != obj.type:
            return f"{obj.id}: type {obj.type} became {twin.type}"
        expected = _rewrite(obj.to_dict(), mapping)
        for prop in sorted((set(expected) | set(twin)) - strip - {"id"}):
            if prop == "name" and obj.id in mapping:
                continue
            if expected.get(prop) != twin.get(prop):
                return f"{obj.id}: property {prop!r} differs"
    if _edge_multiset(original, mapping) != _edge_multiset(redacted, {}):
        return "relationship edge multisets differ"
    return None


def verify_topology(original: Bundle, redacted: Bundle, mapping: Mapping[str, str],
                    profile: SharingProfile | None = None) -> bool:
    strip = profile.strip_properties if profile is not None else DEFAULT_STRIP
    witness = find_divergence(original, redacted, mapping, strip)
    if witness is not None:
        log.warning("topology divergence: %s", witness)
        return False
    return True
