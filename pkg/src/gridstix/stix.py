"""STIX 2.1 envelope: identifiers, timestamps, objects, bundles and the canonical codec.

Objects are kept close to their wire form. Parsing only enforces the envelope
(id, type, spec_version, id/type agreement); everything else, including
malformed timestamps or unknown properties, is preserved so the validator can
report it.
"""

from __future__ import annotations

import copy
import json
import math
import re
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from types import MappingProxyType
from typing import Any, Callable, Iterable, Iterator, Mapping

__all__ = [
    "BundleSyntaxError",
    "Bundle",
    "EnvelopeError",
    "SelfLoopError",
    "StixError",
    "StixId",
    "StixObject",
    "Timestamp",
    "TokenError",
    "STANDARD_STIX_TYPES",
    "canonical_json",
    "is_token",
    "make_relationship",
    "new_bundle",
    "new_object",
    "parse_bundle",
    "serialize_bundle",
]

SPEC_VERSION = "2.1"

TOKEN_RE = re.compile(r"^[a-z][a-z0-9-]*[a-z0-9]$")
TIMESTAMP_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{3}Z$")
UUID_RE = re.compile(r"^[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}$")

# Envelope keys owned by the codec rather than by a type's property set.
ENVELOPE_KEYS = frozenset({"id", "type", "spec_version", "created", "modified"})
RELATIONSHIP_KEYS = frozenset({"relationship_type", "source_ref", "target_ref"})

# Standard STIX 2.1 types that pass through without grid-specific constraints.
STANDARD_STIX_TYPES = frozenset({
    "attack-pattern", "campaign", "course-of-action", "grouping", "identity",
    "incident", "indicator", "infrastructure", "intrusion-set", "location",
    "malware", "malware-analysis", "note", "observed-data", "opinion", "report",
    "threat-actor", "tool", "vulnerability", "relationship", "sighting",
    "marking-definition", "language-content", "extension-definition",
})


class StixError(Exception):
    """Base class for STIX codec errors."""


class BundleSyntaxError(StixError, ValueError):
    """The document is not well-formed JSON. ``offset`` is the character offset of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class EnvelopeError(StixError, ValueError):
    """An object violates the STIX envelope. ``index`` is the object's position, if any."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"object {index}: {message}")
        self.index = index


class TokenError(StixError, ValueError):
    """A type or relationship token is malformed."""


class SelfLoopError(StixError, ValueError):
    """A relationship would connect an object to itself."""


def is_token(value: object) -> bool:
    return isinstance(value, str) and TOKEN_RE.match(value) is not None


@dataclass(frozen=True, order=True)
class StixId:
    object_type: str
    uuid: str

    def __post_init__(self) -> None:
        if not is_token(self.object_type):
            raise TokenError(f"invalid object type token {self.object_type!r}")
        if not isinstance(self.uuid, str) or not UUID_RE.match(self.uuid):
            raise ValueError(f"invalid UUID {self.uuid!r}")

    @classmethod
    def parse(cls, text: str) -> "StixId":
        if not isinstance(text, str) or "--" not in text:
            raise ValueError(f"malformed STIX identifier {text!r}")
        object_type, _, rest = text.partition("--")
        return cls(object_type, rest)

    @classmethod
    def generate(cls, object_type: str) -> "StixId":
        return cls(object_type, str(uuid.uuid4()))

    @staticmethod
    def is_valid(text: object) -> bool:
        try:
            StixId.parse(text)  # type: ignore[arg-type]
        except (TypeError, ValueError):
            return False
        return True

    def __str__(self) -> str:
        return f"{self.object_type}--{self.uuid}"


def id_prefix(text: str) -> str:
    return text.partition("--")[0]


@dataclass(frozen=True, order=True)
class Timestamp:
    """UTC instant at millisecond precision, serialized as ``YYYY-MM-DDTHH:MM:SS.mmmZ``."""

    instant: datetime

    def __post_init__(self) -> None:
        if self.instant.tzinfo is None:
            raise ValueError("timestamp must be timezone-aware")
        utc = self.instant.astimezone(timezone.utc)
        object.__setattr__(self, "instant", utc.replace(microsecond=utc.microsecond // 1000 * 1000))

    @classmethod
    def parse(cls, text: str) -> "Timestamp":
        if not isinstance(text, str) or not TIMESTAMP_RE.match(text):
            raise ValueError(f"timestamp {text!r} is not YYYY-MM-DDTHH:MM:SS.mmmZ")
        dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ")
        return cls(dt.replace(tzinfo=timezone.utc))

    @classmethod
    def now(cls) -> "Timestamp":
        return cls(datetime.now(timezone.utc))

    @staticmethod
    def is_valid(text: object) -> bool:
        try:
            Timestamp.parse(text)  # type: ignore[arg-type]
        except (TypeError, ValueError):
            return False
        return True

    def __str__(self) -> str:
        return self.instant.strftime("%Y-%m-%dT%H:%M:%S.") + f"{self.instant.microsecond // 1000:03d}Z"


Clock = Callable[[], Timestamp]


def _check_json_value(value: Any, path: str) -> None:
    if isinstance(value, float) and not math.isfinite(value):
        raise ValueError(f"non-finite number at {path}")
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise ValueError(f"non-string key at {path}")
            _check_json_value(v, f"{path}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check_json_value(v, f"{path}[{i}]")
    elif not isinstance(value, (str, int, float, bool, type(None))):
        raise ValueError(f"unsupported value type {type(value).__name__} at {path}")


def _thaw(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {k: _thaw(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_thaw(v) for v in value]
    return value


class StixObject(Mapping[str, Any]):
    """An immutable STIX object. Acts as a read-only mapping over its wire properties."""

    __slots__ = ("_data", "_canonical")

    def __init__(self, data: Mapping[str, Any], *, index: int | None = None):
        for key in ("id", "type", "spec_version"):
            if key not in data:
                raise EnvelopeError(f"missing required envelope property {key!r}", index)
        obj_id, obj_type = data["id"], data["type"]
        if not isinstance(obj_id, str) or "--" not in obj_id:
            raise EnvelopeError(f"malformed id {obj_id!r}", index)
        if not isinstance(obj_type, str):
            raise EnvelopeError(f"type must be a string, got {obj_type!r}", index)
        if id_prefix(obj_id) != obj_type:
            raise EnvelopeError(f"id {obj_id!r} does not match type {obj_type!r}", index)
        try:
            _check_json_value(dict(data), obj_id)
        except ValueError as exc:
            raise EnvelopeError(str(exc), index) from None
        self._data = _thaw(data)
        self._canonical = canonical_json(self._data)

    def __getitem__(self, key: str) -> Any:
        return copy.deepcopy(self._data[key])

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, StixObject):
            return self._canonical == other._canonical
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._canonical)

    def __repr__(self) -> str:
        return f"StixObject({self.id!r})"

    @property
    def id(self) -> str:
        return self._data["id"]

    @property
    def type(self) -> str:
        return self._data["type"]

    @property
    def spec_version(self) -> Any:
        return self._data["spec_version"]

    @property
    def created(self) -> Any:
        return self._data.get("created")

    @property
    def modified(self) -> Any:
        return self._data.get("modified")

    @property
    def created_by_ref(self) -> str | None:
        return self._data.get("created_by_ref")

    @property
    def labels(self) -> list[str] | None:
        return self.get("labels")

    @property
    def source_ref(self) -> str | None:
        return self._data.get("source_ref")

    @property
    def target_ref(self) -> str | None:
        return self._data.get("target_ref")

    @property
    def relationship_type(self) -> str | None:
        return self._data.get("relationship_type")

    @property
    def is_relationship(self) -> bool:
        return self.type == "relationship"

    @property
    def properties(self) -> Mapping[str, Any]:
        """Read-only view of every property, envelope included."""
        return MappingProxyType(self._data)

    @property
    def sort_key(self) -> tuple[str, str]:
        modified = self._data.get("modified")
        return (self.id, modified if isinstance(modified, str) else json.dumps(modified))

    def to_dict(self) -> dict[str, Any]:
        return copy.deepcopy(self._data)

    def evolve(self, **changes: Any) -> "StixObject":
        """Copy with properties replaced; a value of ``None`` removes the property."""
        data = self.to_dict()
        for key, value in changes.items():
            if value is None:
                data.pop(key, None)
            else:
                data[key] = value
        return StixObject(data)


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, ensure_ascii=False, indent=2, allow_nan=False)


class Bundle:
    """A set of STIX objects, held in canonical (id, modified) order."""

    __slots__ = ("id", "objects", "extra")

    def __init__(self, objects: Iterable[StixObject] = (), id: str | None = None,
                 extra: Mapping[str, Any] | None = None):
        bundle_id = id if id is not None else str(StixId.generate("bundle"))
        try:
            parsed = StixId.parse(bundle_id)
        except ValueError as exc:
            raise EnvelopeError(f"invalid bundle id: {exc}") from None
        if parsed.object_type != "bundle":
            raise EnvelopeError(f"bundle id {bundle_id!r} must have type 'bundle'")
        ordered = sorted(objects, key=lambda o: o.sort_key)
        for prev, cur in zip(ordered, ordered[1:]):
            if prev.sort_key == cur.sort_key:
                raise EnvelopeError(f"duplicate object {cur.id} with modified {cur.modified!r}")
        object.__setattr__(self, "id", bundle_id)
        object.__setattr__(self, "objects", tuple(ordered))
        object.__setattr__(self, "extra", MappingProxyType(_thaw(extra or {})))

    def __setattr__(self, name: str, value: Any) -> None:
        raise AttributeError("Bundle is immutable")

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Bundle):
            return (self.id, self.objects, dict(self.extra)) == (other.id, other.objects, dict(other.extra))
        return NotImplemented

    def __hash__(self) -> int:
        return hash((self.id, self.objects))

    def __len__(self) -> int:
        return len(self.objects)

    def __iter__(self) -> Iterator[StixObject]:
        return iter(self.objects)

    def __repr__(self) -> str:
        return f"Bundle({self.id!r}, {len(self.objects)} objects)"

    def latest(self) -> dict[str, StixObject]:
        """Most recent version of every object id, keyed by id."""
        out: dict[str, StixObject] = {}
        for obj in self.objects:
            out[obj.id] = obj  # canonical order puts later `modified` last
        return out

    def with_objects(self, objects: Iterable[StixObject]) -> "Bundle":
        return Bundle(objects, id=self.id, extra=self.extra)

    def to_dict(self) -> dict[str, Any]:
        doc = _thaw(self.extra)
        doc.update(type="bundle", id=self.id, objects=[o.to_dict() for o in self.objects])
        return doc


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite number {name} is not allowed")


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise ValueError(f"duplicate key {key!r}")
        out[key] = value
    return out


def loads_document(text: str | bytes) -> Any:
    """Decode a UTF-8 JSON document strictly (no NaN, no duplicate keys)."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BundleSyntaxError(f"invalid UTF-8: {exc.reason}", exc.start) from None
    try:
        return json.loads(text, object_pairs_hook=_no_duplicates, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise BundleSyntaxError(exc.msg, exc.pos) from None
    except ValueError as exc:
        raise BundleSyntaxError(str(exc)) from None


def bundle_from_dict(doc: Any) -> Bundle:
    if not isinstance(doc, dict):
        raise EnvelopeError("top-level document must be an object")
    if doc.get("type") != "bundle":
        raise EnvelopeError(f"top-level type must be 'bundle', got {doc.get('type')!r}")
    if "id" not in doc:
        raise EnvelopeError("bundle is missing 'id'")
    raw_objects = doc.get("objects", [])
    if not isinstance(raw_objects, list):
        raise EnvelopeError("'objects' must be a list")
    objects = []
    for i, raw in enumerate(raw_objects):
        if not isinstance(raw, dict):
            raise EnvelopeError("object must be a JSON object", i)
        objects.append(StixObject(raw, index=i))
    seen: dict[tuple[str, str], int] = {}
    for i, obj in enumerate(objects):
        if obj.sort_key in seen:
            raise EnvelopeError(f"duplicate (id, modified) pair with object {seen[obj.sort_key]}", i)
        seen[obj.sort_key] = i
    extra = {k: v for k, v in doc.items() if k not in ("type", "id", "objects")}
    return Bundle(objects, id=doc["id"], extra=extra)


def parse_bundle(text: str | bytes) -> Bundle:
    """Parse a bundle document. Unknown properties and types are preserved as-is."""
    return bundle_from_dict(loads_document(text))


def serialize_bundle(bundle: Bundle) -> str:
    """Canonical form: sorted keys, objects ordered by (id, modified), two-space indent."""
    return canonical_json(bundle.to_dict()) + "\n"


def new_object(object_type: str, properties: Mapping[str, Any] | None = None,
               clock: Clock | None = None) -> StixObject:
    if not is_token(object_type):
        raise TokenError(f"invalid object type token {object_type!r}")
    props = dict(properties or {})
    clash = ENVELOPE_KEYS & props.keys()
    if clash:
        raise ValueError(f"envelope properties cannot be supplied: {sorted(clash)}")
    has_refs = RELATIONSHIP_KEYS & props.keys()
    if object_type == "relationship" and has_refs != RELATIONSHIP_KEYS:
        raise ValueError("relationship objects need relationship_type, source_ref and target_ref")
    if object_type != "relationship" and has_refs:
        raise ValueError(f"{sorted(has_refs)} only belong on relationship objects")
    now = str((clock or Timestamp.now)())
    data = {
        "type": object_type,
        "id": str(StixId.generate(object_type)),
        "spec_version": SPEC_VERSION,
        "created": now,
        "modified": now,
        **props,
    }
    return StixObject(data)


def make_relationship(rel_type: str, source: StixId | str, target: StixId | str,
                      properties: Mapping[str, Any] | None = None,
                      clock: Clock | None = None) -> StixObject:
    if not is_token(rel_type):
        raise TokenError(f"invalid relationship type token {rel_type!r}")
    src, tgt = str(source), str(target)
    for ref in (src, tgt):
        StixId.parse(ref)
    if src == tgt:
        raise SelfLoopError(f"{rel_type} cannot relate {src} to itself")
    props = dict(properties or {})
    props.update(relationship_type=rel_type, source_ref=src, target_ref=tgt)
    return new_object("relationship", props, clock)


def new_bundle(objects: Iterable[StixObject] = ()) -> Bundle:
    return Bundle(objects)
