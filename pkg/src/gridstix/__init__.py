"""Grid-STIX: STIX 2.1 threat intelligence for electric power grids.

The package is layered: :mod:`gridstix.stix` (objects and bundles),
:mod:`gridstix.schema` (type registry), :mod:`gridstix.validator`,
:mod:`gridstix.graph` (analytics), :mod:`gridstix.policy`,
:mod:`gridstix.redaction`, :mod:`gridstix.export` and :mod:`gridstix.cli`.
"""

__version__ = "0.1.0"

from .graph import ThreatGraph, attack_paths, build_graph, cascade_impact, protection_coverage, supply_chain_risk
from .policy import AccessRequest, PolicyRule, evaluate
from .redaction import SharingProfile, redact_bundle, verify_topology
from .schema import SchemaRegistry, builtin_registry, load_registry
from .stix import Bundle, StixObject, new_bundle, new_object, parse_bundle, serialize_bundle
from .validator import ValidationReport, ValidatorConfig, merge_bundles, validate_bundle

__all__ = [
    "AccessRequest", "Bundle", "PolicyRule", "SchemaRegistry", "SharingProfile", "StixObject",
    "ThreatGraph", "ValidationReport", "ValidatorConfig", "__version__", "attack_paths", "build_graph",
    "builtin_registry", "cascade_impact", "evaluate", "load_registry", "merge_bundles", "new_bundle",
    "new_object", "parse_bundle", "protection_coverage", "redact_bundle", "serialize_bundle",
    "supply_chain_risk", "validate_bundle", "verify_topology",
]
