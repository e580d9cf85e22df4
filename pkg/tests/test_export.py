import json
import warnings

import pytest
from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from gridstix.export import (
    PALETTE, CollisionError, EmptyGraphWarning, build_ir, export_schemas, export_viz,
)
from gridstix.graph import build_graph
from gridstix.schema import MODULES, builtin_registry, load_registry

from conftest import load_fixture

REG = builtin_registry()
IR = build_ir(REG)


def test_one_ir_per_type_in_order():
    names = [ir.type_name for ir in IR]
    assert len(names) == len(REG) == 61
    assert names == sorted(names)


def test_inherited_properties_are_flattened():
    sub = next(ir for ir in IR if ir.type_name == "substation")
    declared = {p.name: p.declared_by for p in sub.resolved_properties}
    assert declared["latitude"] == "physical-asset"
    assert set(declared) == set(REG.property_specs("substation"))
    assert sub.ancestors[0] == "substation" and "grid-component" in sub.ancestors


def test_relationship_slots():
    relay = next(ir for ir in IR if ir.type_name == "protection-relay")
    assert ("protects-asset", "source") in relay.relationship_slots


def test_collision_detected():
    reg = load_registry({"descriptors": [{
        "type_name": "odd-substation", "module": "assets", "parent": "substation",
        "stix_base": "infrastructure", "required": {}, "optional": {"latitude": "string"},
    }]}, base=REG)
    with pytest.raises(CollisionError):
        build_ir(reg)


@pytest.fixture(scope="module")
def schema_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("schemas")
    export_schemas(IR, out, REG)
    return out


def test_schema_files(schema_dir):
    files = sorted(p.name for p in schema_dir.iterdir())
    assert len([f for f in files if f.endswith(".schema.json")]) == len(REG)
    assert {"index.json", "vocabularies.json"} <= set(files)
    index = json.loads((schema_dir / "index.json").read_text())
    assert [t["type_name"] for t in index["types"]] == sorted(REG.descriptors)


def test_byte_identical_rerun(schema_dir, tmp_path):
    export_schemas(build_ir(REG), tmp_path, REG)
    for path in schema_dir.iterdir():
        assert (tmp_path / path.name).read_bytes() == path.read_bytes()


def test_vocabulary_refs(schema_dir):
    schema = json.loads((schema_dir / "ot-device.schema.json").read_text())
    assert schema["properties"]["protocols"]["items"] == {"$ref": "urn:grid-stix:vocabularies#/$defs/grid-protocol"}
    vocab = json.loads((schema_dir / "vocabularies.json").read_text())
    proto = vocab["$defs"]["grid-protocol"]
    assert proto["x-open-vocabulary"] is True and "DNP3" in proto["examples"] and "enum" not in proto


def _validators(schema_dir):
    docs = {p.name: json.loads(p.read_text()) for p in schema_dir.iterdir() if p.name != "index.json"}
    store = Registry().with_resources((d["$id"], Resource.from_contents(d)) for d in docs.values())
    return {d["title"]: Draft202012Validator(d, registry=store)
            for name, d in docs.items() if name.endswith(".schema.json")}


def test_schemas_are_valid_and_accept_clean_fixtures(schema_dir):
    validators = _validators(schema_dir)
    for v in validators.values():
        Draft202012Validator.check_schema(v.schema)
    checked = 0
    for name in ("substation_attack.json", "chain.json", "policy_assets.json", "policy_rules.json"):
        for obj in load_fixture(name).objects:
            key = obj.get("relationship_type") if obj.type == "relationship" else obj.type
            if key in validators:
                validators[key].validate(obj.to_dict())
                checked += 1
    assert checked > 20


def test_schema_rejects_missing_required(schema_dir):
    validators = _validators(schema_dir)
    relay = next(o for o in load_fixture("substation_attack.json").objects if o.type == "protection-relay")
    doc = relay.to_dict()
    del doc["protocols"]
    assert not validators["protection-relay"].is_valid(doc)


def test_empty_graph_warns():
    with pytest.warns(EmptyGraphWarning):
        viz = export_viz(build_graph(load_fixture("empty.json")))
    assert viz.nodes == () and viz.edges == ()
    assert "<svg" in viz.html


def _viz(**filters):
    with warnings.catch_warnings():
        warnings.simplefilter("error", EmptyGraphWarning)
        return export_viz(build_graph(load_fixture("substation_attack.json")), **filters)


def test_edge_closure_and_colors():
    viz = _viz()
    ids = {n["id"] for n in viz.nodes}
    assert all(e["source"] in ids and e["target"] in ids for e in viz.edges)
    by_module = {}
    for n in viz.nodes:
        by_module.setdefault(n["module"], set()).add(n["color"])
    assert all(len(c) == 1 for c in by_module.values())
    assert by_module["components"] == {PALETTE["components"]}


def test_module_filter():
    viz = _viz(filter_modules={"components"})
    assert viz.nodes and {n["module"] for n in viz.nodes} == {"components"}
    ids = {n["id"] for n in viz.nodes}
    assert all(e["source"] in ids and e["target"] in ids for e in viz.edges)
    assert viz.filters["applied"]["modules"] == ["components"]


def test_type_filter():
    viz = _viz(filter_types={"substation", "transformer"})
    assert sorted(n["type"] for n in viz.nodes) == ["substation", "transformer"]
    assert [e["relationship_type"] for e in viz.edges] == ["contains"]


def test_html_is_self_contained():
    html = _viz().html
    for marker in ('src="http', "src='http", 'href="http', "<link", "@import"):
        assert marker not in html
    payload = html.split('id="graph-data">', 1)[1].split("</script>", 1)[0]
    data = json.loads(payload)
    assert len(data["nodes"]) == 7 and len(data["edges"]) == len(_viz().edges)


def test_html_escapes_payload():
    bundle = load_fixture("substation_attack.json")
    objs = [o.evolve(name="</script><b>x</b>") if o.type == "substation" else o for o in bundle.objects]
    html = export_viz(build_graph(bundle.with_objects(objs))).html
    assert "</script><b>" not in html and "\\u003c/script\\u003e" in html


def test_palette_covers_modules():
    assert tuple(PALETTE) == MODULES and len(set(PALETTE.values())) == len(MODULES)
