import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from gridstix.schema import builtin_registry
from gridstix.stix import Bundle, bundle_from_dict, parse_bundle

FIXTURES = Path(__file__).parent / "fixtures"
CORPUS = sorted(p.name for p in FIXTURES.glob("*.json")
                if p.name not in {"pseudonym_vectors.json", "profile_default.json", "request_fw_update.json"})

# `gridstix validate` exit status per corpus file: 1 only where a seeded fault is an error
EXPECTED_VALIDATE_EXIT = {
    "chain.json": 0, "context_normal.json": 0, "context_peak.json": 0, "empty.json": 0,
    "policy_assets.json": 0, "policy_rules.json": 0, "substation_attack.json": 0,
    "v1_structural.json": 1, "v2_registry.json": 1, "v3_naming.json": 1, "v4_vocabulary.json": 0,
    "v5_referential.json": 1, "v6_domain.json": 1, "v7_connectivity.json": 0,
}

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (name, passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def fixture_path(name: str) -> Path:
    return FIXTURES / name


def fixture_doc(name: str):
    return json.loads(fixture_path(name).read_text(encoding="utf-8"))


def load_fixture(name: str) -> Bundle:
    return parse_bundle(fixture_path(name).read_bytes())


def as_bundle(doc: dict) -> Bundle:
    return bundle_from_dict(doc)


@pytest.fixture(scope="session")
def registry():
    return builtin_registry()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}")
