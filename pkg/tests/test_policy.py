import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridstix.graph import build_graph
from gridstix.policy import (
    EFFECTS, FIRMWARE_STATES, PRIVILEGES, AccessRequest, ContextConflictError, PolicyDecisionPoint, PolicyError,
    PolicyRule, RuleConditions, UnknownContext, UnknownTarget, applicable_rules, evaluate, rules_from_bundle,
)
from gridstix.validator import merge_bundles

from conftest import fixture_doc, load_fixture
from oracles import reference_combine, reference_rule_outcome

RELAY = "protection-relay--00000000-0000-4000-8000-00000000d001"
XFMR = "transformer--00000000-0000-4000-8000-00000000d002"
ENGINEER = "identity--00000000-0000-4000-8000-00000000d003"
NORMAL = "operational-context--00000000-0000-4000-8000-00000000d201"
PEAK = "operational-context--00000000-0000-4000-8000-00000000d301"


@pytest.fixture(scope="module")
def graph():
    return build_graph(merge_bundles([load_fixture("policy_assets.json"), load_fixture("context_normal.json"),
                                      load_fixture("context_peak.json")]))


def rule(n: int, effect: str, privileges=("firmware-update",), types=("ot-device",), ids=(), **conditions):
    return PolicyRule(f"access-policy--00000000-0000-4000-8000-{n:012d}", effect, frozenset(privileges),
                      frozenset(types), frozenset(ids), RuleConditions(**conditions))


def request(**fields):
    base = dict(subject=ENGINEER, target=RELAY, privilege="firmware-update")
    base.update(fields)
    return AccessRequest(**base)


def test_no_rules_apply(graph):
    assert applicable_rules(request(), [], graph) == []


def test_subtype_closure(graph):
    r = rule(1, "permit")
    assert applicable_rules(request(), [r], graph, [NORMAL]) == [r]


def test_target_by_id(graph):
    r = rule(1, "permit", types=(), ids=(XFMR,))
    assert applicable_rules(request(target=XFMR), [r], graph) == [r]
    assert applicable_rules(request(), [r], graph) == []


def test_state_mismatch(graph):
    r = rule(1, "deny", operational_states=frozenset({"peak-demand"}))
    assert applicable_rules(request(), [r], graph, [NORMAL]) == []
    assert applicable_rules(request(), [r], graph, [PEAK]) == [r]


def test_default_deny(graph):
    decision = evaluate(request(), [], graph)
    assert decision.outcome == "deny" and decision.matched_rules == ()


def test_step_up_for_missing_factor(graph):
    decision = evaluate(request(auth_factors=1), [rule(1, "permit", min_auth_factors=2)], graph)
    assert decision.outcome == "step-up-auth"


def test_quarantine_beats_permit(graph):
    rules = [rule(1, "quarantine", on_anomaly=True), rule(2, "permit")]
    assert evaluate(request(anomaly_flag=True), rules, graph).outcome == "quarantine"
    assert evaluate(request(anomaly_flag=False), rules, graph).outcome == "permit"


def test_firmware_requirement(graph):
    rules = [rule(1, "permit", require_firmware_verified=True)]
    assert evaluate(request(firmware_integrity="failed"), rules, graph).outcome == "step-up-auth"
    assert evaluate(request(firmware_integrity="verified"), rules, graph).outcome == "permit"


def test_step_up_rule_silent_when_satisfied(graph):
    rules = [rule(1, "step-up-auth", min_auth_factors=1)]
    decision = evaluate(request(auth_factors=1), rules, graph)
    assert decision.outcome == "deny" and decision.rationale == ("no rule fired: default deny",)


def test_fixture_rules(graph):
    rules = rules_from_bundle(load_fixture("policy_rules.json"), graph)
    req = AccessRequest.from_dict(fixture_doc("request_fw_update.json"))
    assert evaluate(req, rules, graph, [NORMAL]).outcome == "permit"
    assert evaluate(req, rules, graph, [PEAK]).outcome == "deny"
    assert evaluate(AccessRequest(**{**req.to_dict(), "anomaly_flag": True}), rules, graph, [NORMAL]).outcome \
        == "quarantine"


def test_context_errors(graph):
    with pytest.raises(ContextConflictError):
        evaluate(request(), [], graph, [NORMAL, PEAK])
    with pytest.raises(UnknownContext):
        evaluate(request(), [], graph, ["operational-context--missing"])
    with pytest.raises(UnknownContext):
        evaluate(request(), [], graph, [XFMR])
    with pytest.raises(UnknownTarget):
        evaluate(request(target="substation--missing"), [], graph)


@pytest.mark.parametrize("fields", [dict(privilege="admin"), dict(auth_factors=-1),
                                    dict(firmware_integrity="mostly"), dict(at="yesterday")])
def test_request_validation(fields):
    with pytest.raises(PolicyError):
        request(**fields)


def test_rule_validation():
    with pytest.raises(PolicyError):
        rule(1, "maybe")
    with pytest.raises(PolicyError):
        rule(1, "permit", privileges=())
    with pytest.raises(PolicyError):
        rule(1, "permit", types=())


def test_request_round_trip():
    req = request(auth_factors=2, anomaly_flag=True, at="2024-01-01T00:00:00.000Z")
    assert AccessRequest.from_dict(req.to_dict()) == req


GRID = [rule(i, e, privileges=("operate", "configure", "firmware-update"),
             operational_states=None if s is None else frozenset(s), min_auth_factors=m,
             require_firmware_verified=f, on_anomaly=a)
        for i, (e, s, m, f, a) in enumerate(itertools.product(
            EFFECTS, [None, ("peak-demand",)], [None, 2], [False, True], [False, True]))]

requests = st.builds(request, privilege=st.sampled_from(PRIVILEGES), auth_factors=st.integers(0, 3),
                     firmware_integrity=st.sampled_from(FIRMWARE_STATES), anomaly_flag=st.booleans())


@given(st.lists(st.sampled_from(GRID), max_size=5, unique=True), requests, st.sampled_from([[], [NORMAL], [PEAK]]),
       st.randoms(use_true_random=False))
def test_order_independent_and_sound(graph, rules, req, contexts, rnd):
    decision = evaluate(req, rules, graph, contexts)
    shuffled = rules[:]
    rnd.shuffle(shuffled)
    assert evaluate(req, shuffled, graph, contexts) == decision
    if decision.outcome == "permit":
        pdp = PolicyDecisionPoint(graph, contexts)
        assert any(r.effect == "permit" and r.conditions.credentials_met(req) for r in pdp.applicable(req, rules))


def _reference(r: PolicyRule) -> dict:
    c = r.conditions
    return {"effect": r.effect, "privileges": r.privileges, "types": r.applies_to_types,
            "states": c.operational_states, "min_auth": c.min_auth_factors, "fw": c.require_firmware_verified,
            "anomaly": c.on_anomaly}


RELAY_KINDS = {"protection-relay", "ot-device"}


@given(st.lists(st.sampled_from(GRID), max_size=4), requests,
       st.sampled_from([(NORMAL, "normal"), (PEAK, "peak-demand")]))
def test_matches_reference_evaluator(graph, rules, req, context):
    cid, state = context
    expected = reference_combine(reference_rule_outcome(_reference(r), req.to_dict(), RELAY_KINDS, state)
                                 for r in rules)
    assert evaluate(req, rules, graph, [cid]).outcome == expected
