import io
import json
import subprocess
import sys

import pytest

from gridstix import cli
from gridstix.cli import run

from conftest import CORPUS, EXPECTED_VALIDATE_EXIT, fixture_path

SUB = "substation--00000000-0000-4000-8000-000000000005"
XFMR = "transformer--00000000-0000-4000-8000-000000000004"
PATTERN = "firmware-attack-pattern--00000000-0000-4000-8000-000000000002"
CHAIN_ROOT = "substation--00000000-0000-4000-8000-00000000c001"


def call(*argv, stdin=None):
    out, err = io.StringIO(), io.StringIO()
    if stdin is not None:
        old = sys.stdin
        sys.stdin = io.TextIOWrapper(io.BytesIO(stdin))
        try:
            code = run(list(argv), out, err)
        finally:
            sys.stdin = old
    else:
        code = run(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def fx(name):
    return str(fixture_path(name))


def test_expected_map_covers_corpus():
    assert sorted(EXPECTED_VALIDATE_EXIT) == CORPUS


@pytest.mark.parametrize("name", CORPUS)
def test_validate_exit_codes(name):
    code, out, _ = call("validate", fx(name), "--format", "structured")
    assert code == EXPECTED_VALIDATE_EXIT[name]
    assert json.loads(out)["passed"] == (code == 0)


def test_validate_stdin():
    code, out, _ = call("validate", stdin=fixture_path("substation_attack.json").read_bytes())
    assert code == 0


def test_validate_text_lists_findings():
    code, out, _ = call("validate", fx("v6_domain.json"))
    assert code == 1 and "V6-DOMAIN-SOURCE" in out


def test_allow_dangling():
    assert call("validate", fx("v5_referential.json"), "--allow-dangling")[0] == 0


def test_cascade_table():
    code, out, _ = call("analyze", "cascade", fx("chain.json"), "--seeds", CHAIN_ROOT)
    assert code == 0
    assert "0.9" in out and "0.72" in out and out.splitlines()[0].split() == ["node", "type", "impact"]


def test_cascade_structured():
    code, out, _ = call("analyze", "cascade", fx("chain.json"), "--seeds", CHAIN_ROOT, "--format", "structured")
    doc = json.loads(out)
    assert code == 0 and out.endswith("\n")
    assert sorted(doc["scores"].values()) == pytest.approx([0.72, 0.9, 1.0], abs=1e-12)


def test_unknown_seed_is_usage_error():
    code, _, err = call("analyze", "cascade", fx("chain.json"), "--seeds", "substation--missing")
    assert code == 2 and err


def test_invalid_bundle_refused_by_analytics():
    code, _, err = call("analyze", "protection", fx("v6_domain.json"))
    assert code == 1 and "V6-DOMAIN-SOURCE" in err


def test_attack_paths():
    code, out, _ = call("analyze", "attack-paths", fx("substation_attack.json"), "--pattern", PATTERN,
                        "--format", "structured")
    assert code == 0 and len(json.loads(out)["paths"]) == 2


def test_supply_chain_and_protection():
    code, out, _ = call("analyze", "supply-chain", fx("substation_attack.json"), "--root", SUB)
    assert code == 0 and "HHI" in out
    code, out, _ = call("analyze", "protection", fx("substation_attack.json"), "--format", "structured")
    assert code == 0 and "unprotected" in json.loads(out)


@pytest.mark.parametrize("context,outcome", [("context_normal.json", "permit"), ("context_peak.json", "deny")])
def test_policy_eval(context, outcome):
    code, out, _ = call("policy", "eval", fx("policy_assets.json"), "--rules", fx("policy_rules.json"),
                        "--request", fx("request_fw_update.json"), "--contexts", fx(context),
                        "--format", "structured")
    assert code == 0 and json.loads(out)["decision"]["outcome"] == outcome


def test_redact_reads_key_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("GRID_KEY", "secret")
    target = tmp_path / "shared.json"
    code, out, err = call("redact", fx("substation_attack.json"), "--key-env", "GRID_KEY", "--out", str(target))
    assert code == 0 and out == "" and "secret" not in err
    text = target.read_text()
    assert SUB not in text
    assert call("validate", str(target))[0] == 0


def test_redact_missing_key(monkeypatch):
    monkeypatch.delenv("GRID_KEY", raising=False)
    code, out, err = call("redact", fx("substation_attack.json"), "--key-env", "GRID_KEY")
    assert code == 2 and out == "" and "GRID_KEY" in err


def test_redact_invalid_bundle(monkeypatch):
    monkeypatch.setenv("GRID_KEY", "secret")
    assert call("redact", fx("v6_domain.json"), "--key-env", "GRID_KEY")[0] == 1


def test_export_commands(tmp_path):
    code, _, _ = call("export", "schema", "--out", str(tmp_path / "schemas"))
    assert code == 0 and len(list((tmp_path / "schemas").glob("*.schema.json"))) == 61
    html = tmp_path / "view.html"
    code, _, err = call("export", "viz", fx("substation_attack.json"), "--out", str(html),
                        "--filter-module", "components")
    assert code == 0 and html.read_text().startswith("<!DOCTYPE html>")


def test_merge(tmp_path):
    target = tmp_path / "merged.json"
    code, _, _ = call("merge", fx("policy_assets.json"), fx("context_normal.json"), "--out", str(target))
    parts = [json.loads(fixture_path(n).read_text())["objects"] for n in ("policy_assets.json", "context_normal.json")]
    assert code == 0 and len(json.loads(target.read_text())["objects"]) == sum(map(len, parts))


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["analyze", "cascade", "x.json"],
                                  ["validate", "/nonexistent/bundle.json"], ["validate", "--format", "xml"]])
def test_usage_errors(argv):
    assert call(*argv)[0] == 2


def test_malformed_json(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert call("validate", str(bad))[0] == 2


def test_help_and_version(capsys):
    assert call("--help")[0] == 0
    assert call("--version")[0] == 0


def test_internal_error(monkeypatch):
    def boom(*_):
        raise RuntimeError("kaput")
    monkeypatch.setattr(cli, "validate_bundle", boom)
    code, _, err = call("validate", fx("empty.json"))
    assert code == 3 and "internal error" in err


def test_no_stray_files(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("GRID_KEY", "k")
    for argv in (["validate", fx("substation_attack.json")],
                 ["analyze", "cascade", fx("chain.json"), "--seeds", CHAIN_ROOT],
                 ["redact", fx("substation_attack.json"), "--key-env", "GRID_KEY"]):
        call(*argv)
    assert list(tmp_path.iterdir()) == []


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gridstix", "validate", fx("v6_domain.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "V6-DOMAIN-SOURCE" in proc.stdout
