"""Registry -> intermediate representation -> rendered artifacts.

Two artifact families: one JSON Schema (2020-12) document per registered type
plus ``index.json`` and ``vocabularies.json``, and a single self-contained HTML
view of a threat graph.
"""

from __future__ import annotations

import math
import string
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .graph import ThreatGraph
from .schema import MODULES, SchemaRegistry, vocabulary_of
from .stix import SPEC_VERSION, canonical_json

__all__ = [
    "PALETTE",
    "CollisionError",
    "EmptyGraphWarning",
    "TypeIR",
    "VizDocument",
    "build_ir",
    "export_schemas",
    "export_viz",
]

JSON_SCHEMA_DIALECT = "https://json-schema.org/draft/2020-12/schema"
VOCAB_DOC_ID = "urn:grid-stix:vocabularies"
UUID_PATTERN = "[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}"
TIMESTAMP_PATTERN = r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{3}Z$"

PALETTE = {
    "assets": "#1f77b4",
    "components": "#ff7f0e",
    "relationships": "#2ca02c",
    "attack-patterns": "#d62728",
    "policies": "#9467bd",
    "events-observables": "#8c564b",
    "nuclear-safeguards": "#e377c2",
    "operational-contexts": "#7f7f7f",
    "environmental-contexts": "#bcbd22",
    "cyber-contexts": "#17becf",
    "physical-contexts": "#aec7e8",
    "vocabularies": "#ffbb78",
}
UNREGISTERED = "unregistered"
UNREGISTERED_COLOR = "#c0c0c0"
assert tuple(PALETTE) == MODULES


class CollisionError(ValueError):
    """A type redeclares an inherited property with a different semantic type."""


class EmptyGraphWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ResolvedProperty:
    name: str
    semantic_type: str
    required: bool
    declared_by: str


@dataclass(frozen=True)
class TypeIR:
    type_name: str
    label: str
    module: str
    stix_base: str
    ancestors: tuple[str, ...]
    description: str
    resolved_properties: tuple[ResolvedProperty, ...]
    relationship_slots: tuple[tuple[str, str], ...]

    @property
    def is_relationship(self) -> bool:
        return "relationship" in self.ancestors


def _flatten(registry: SchemaRegistry, type_name: str) -> tuple[ResolvedProperty, ...]:
    resolved: dict[str, ResolvedProperty] = {}
    for ancestor in reversed(registry.ancestors(type_name)):
        for prop in registry.descriptor(ancestor).properties:
            prior = resolved.get(prop.name)
            if prior is None:
                resolved[prop.name] = ResolvedProperty(prop.name, prop.semantic_type, prop.required, ancestor)
                continue
            if prior.semantic_type != prop.semantic_type:
                raise CollisionError(f"{ancestor}.{prop.name} is {prop.semantic_type!r} but "
                                     f"{prior.declared_by} declares {prior.semantic_type!r}")
            if prop.required and not prior.required:
                resolved[prop.name] = ResolvedProperty(prop.name, prop.semantic_type, True, prior.declared_by)
    return tuple(resolved.values())


def build_ir(registry: SchemaRegistry) -> list[TypeIR]:
    """One IR per type, sorted by name, with inherited properties flattened."""
    irs = []
    for name in sorted(registry.descriptors):
        desc = registry.descriptor(name)
        chain = registry.ancestors(name)
        slots = set()
        for rel, con in registry.constraints.items():
            if any(member in chain for member in con.allowed_sources):
                slots.add((rel, "source"))
            if any(member in chain for member in con.allowed_targets):
                slots.add((rel, "target"))
        irs.append(TypeIR(name, desc.label, desc.module, desc.stix_base, chain, desc.description,
                          _flatten(registry, name), tuple(sorted(slots))))
    return irs


# -- schema rendering -----------------------------------------------------------

def _value_schema(semtype: str) -> dict[str, Any]:
    if semtype.startswith("list:"):
        return {"type": "array", "items": _value_schema(semtype[len("list:"):])}
    vocab = vocabulary_of(semtype)
    if vocab is not None:
        return {"$ref": f"{VOCAB_DOC_ID}#/$defs/{vocab}"}
    return {
        "string": {"type": "string"},
        "integer": {"type": "integer"},
        "number": {"type": "number"},
        "fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "boolean": {"type": "boolean"},
        "timestamp": {"type": "string", "pattern": TIMESTAMP_PATTERN},
        "identifier": {"type": "string", "pattern": f"^[a-z][a-z0-9-]*[a-z0-9]--{UUID_PATTERN}$"},
        "type-name": {"type": "string", "pattern": "^[a-z][a-z0-9]*(?:-[a-z0-9]+)*$"},
    }[semtype]


def render_type_schema(ir: TypeIR) -> dict[str, Any]:
    object_type = "relationship" if ir.is_relationship else ir.type_name
    props: dict[str, Any] = {
        "type": {"const": object_type},
        "id": {"type": "string", "pattern": f"^{object_type}--{UUID_PATTERN}$"},
        "spec_version": {"const": SPEC_VERSION},
        "created": _value_schema("timestamp"),
        "modified": _value_schema("timestamp"),
        "created_by_ref": _value_schema("identifier"),
        "label": {"const": ir.label},
    }
    required = ["type", "id", "spec_version", "created", "modified"]
    if ir.is_relationship:
        props["source_ref"] = _value_schema("identifier")
        props["target_ref"] = _value_schema("identifier")
        required += ["source_ref", "target_ref", "relationship_type"]
        props["relationship_type"] = ({"const": ir.type_name} if ir.type_name != "relationship"
                                      else _value_schema("type-name"))
    for prop in ir.resolved_properties:
        props[prop.name] = _value_schema(prop.semantic_type)
        if prop.required:
            required.append(prop.name)
    return {
        "$schema": JSON_SCHEMA_DIALECT,
        "$id": f"urn:grid-stix:schema:{ir.type_name}",
        "title": ir.type_name,
        "description": ir.description,
        "type": "object",
        "properties": props,
        "required": required,
        "additionalProperties": True,
        "x-grid-stix": {
            "label": ir.label,
            "module": ir.module,
            "stix_base": ir.stix_base,
            "ancestors": list(ir.ancestors),
            "relationship_slots": [{"relationship_type": r, "role": role} for r, role in ir.relationship_slots],
        },
    }


def render_vocabularies(registry: SchemaRegistry) -> dict[str, Any]:
    return {
        "$schema": JSON_SCHEMA_DIALECT,
        "$id": VOCAB_DOC_ID,
        "title": "grid vocabularies",
        "$defs": {name: {"type": "string", "examples": list(v.terms), "x-open-vocabulary": v.open}
                  for name, v in sorted(registry.vocabularies.items())},
    }


def schema_filename(type_name: str) -> str:
    return f"{type_name}.schema.json"


def export_schemas(ir_list: Iterable[TypeIR], out_directory: str | Path,
                   registry: SchemaRegistry | None = None) -> list[Path]:
    """Write one schema per type plus ``index.json`` (and ``vocabularies.json`` given a registry)."""
    out = Path(out_directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    index = []
    for ir in sorted(ir_list, key=lambda i: i.type_name):
        path = out / schema_filename(ir.type_name)
        path.write_text(canonical_json(render_type_schema(ir)) + "\n", encoding="utf-8")
        written.append(path)
        index.append({"type_name": ir.type_name, "label": ir.label, "module": ir.module,
                      "parent": ir.ancestors[1] if len(ir.ancestors) > 1 else None,
                      "schema": path.name})
    documents = {"index.json": {"types": index, "vocabularies": "vocabularies.json" if registry else None}}
    if registry is not None:
        documents["vocabularies.json"] = render_vocabularies(registry)
    for name, doc in documents.items():
        path = out / name
        path.write_text(canonical_json(doc) + "\n", encoding="utf-8")
        written.append(path)
    return written


# -- visualization --------------------------------------------------------------

@dataclass(frozen=True)
class VizDocument:
    html: str
    nodes: tuple[dict[str, Any], ...]
    edges: tuple[dict[str, Any], ...]
    filters: dict[str, Any]


def module_color(module: str) -> str:
    return PALETTE.get(module, UNREGISTERED_COLOR)


_HTML = string.Template("""<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>$title</title>
<style>
body { font-family: sans-serif; margin: 0; display: flex; }
#side { width: 260px; padding: 12px; border-right: 1px solid #ddd; font-size: 13px; }
#side label { display: block; }
.swatch { display: inline-block; width: 10px; height: 10px; margin-right: 4px; }
svg { flex: 1; height: 100vh; }
line { stroke: #999; stroke-width: 1.2; }
text { font-size: 10px; pointer-events: none; }
</style>
</head>
<body>
<div id="side"><h3>$title</h3><div id="modules"></div><hr><div id="types"></div></div>
<svg id="canvas" viewBox="-520 -520 1040 1040"></svg>
<script type="application/json" id="graph-data">
$data
</script>
<script>
(function () {
  var data = JSON.parse(document.getElementById("graph-data").textContent);
  var ns = "http://www.w3.org/2000/svg";
  var svg = document.getElementById("canvas");
  var hidden = {module: {}, type: {}};
  var pos = {}, shapes = {}, lines = [];
  data.nodes.forEach(function (n) { pos[n.id] = n; });
  data.edges.forEach(function (e) {
    var a = pos[e.source], b = pos[e.target];
    var l = document.createElementNS(ns, "line");
    l.setAttribute("x1", a.x); l.setAttribute("y1", a.y);
    l.setAttribute("x2", b.x); l.setAttribute("y2", b.y);
    var t = document.createElementNS(ns, "title");
    t.textContent = e.relationship_type;
    l.appendChild(t); svg.appendChild(l); lines.push([l, e]);
  });
  data.nodes.forEach(function (n) {
    var g = document.createElementNS(ns, "g");
    var c = document.createElementNS(ns, "circle");
    c.setAttribute("cx", n.x); c.setAttribute("cy", n.y); c.setAttribute("r", 9);
    c.setAttribute("fill", n.color);
    var t = document.createElementNS(ns, "title");
    t.textContent = n.id + " (" + n.type + ")";
    c.appendChild(t);
    var label = document.createElementNS(ns, "text");
    label.setAttribute("x", n.x + 11); label.setAttribute("y", n.y + 3);
    label.textContent = n.label;
    g.appendChild(c); g.appendChild(label); svg.appendChild(g); shapes[n.id] = g;
  });
  function visible(n) { return !hidden.module[n.module] && !hidden.type[n.type]; }
  function refresh() {
    data.nodes.forEach(function (n) { shapes[n.id].style.display = visible(n) ? "" : "none"; });
    lines.forEach(function (p) {
      var ok = visible(pos[p[1].source]) && visible(pos[p[1].target]);
      p[0].style.display = ok ? "" : "none";
    });
  }
  function controls(el, kind, values) {
    values.forEach(function (v) {
      var lab = document.createElement("label");
      var box = document.createElement("input");
      box.type = "checkbox"; box.checked = true;
      box.onchange = function () { hidden[kind][v.name] = !box.checked; refresh(); };
      lab.appendChild(box);
      if (v.color) {
        var sw = document.createElement("span");
        sw.className = "swatch"; sw.style.background = v.color; lab.appendChild(sw);
      }
      lab.appendChild(document.createTextNode(v.name));
      el.appendChild(lab);
    });
  }
  controls(document.getElementById("modules"), "module", data.filters.modules);
  controls(document.getElementById("types"), "type", data.filters.types);
})();
</script>
</body>
</html>
""")


def export_viz(graph: ThreatGraph, filter_modules: Iterable[str] | None = None,
               filter_types: Iterable[str] | None = None, title: str = "Grid threat graph") -> VizDocument:
    """Self-contained HTML node-link view with client-side module/type toggles."""
    modules_keep = None if filter_modules is None else frozenset(filter_modules)
    types_keep = None if filter_types is None else frozenset(filter_types)
    registry = graph.registry
    kept = []
    for node in graph.nodes.values():
        module = registry.module_of(node.type) or UNREGISTERED
        if modules_keep is not None and module not in modules_keep:
            continue
        if types_keep is not None and node.type not in types_keep:
            continue
        kept.append((node, module))
    if not kept:
        warnings.warn("graph has no nodes to draw", EmptyGraphWarning, stacklevel=2)

    radius = 420
    nodes = []
    for i, (node, module) in enumerate(kept):
        angle = 2 * math.pi * i / max(len(kept), 1)
        name = node.properties.get("name")
        nodes.append({
            "id": node.id, "type": node.type, "module": module, "color": module_color(module),
            "label": name if isinstance(name, str) else node.type,
            "x": round(radius * math.cos(angle), 2), "y": round(radius * math.sin(angle), 2),
        })
    ids = {n["id"] for n in nodes}
    edges = [{"id": e.edge_id, "relationship_type": e.relationship_type, "source": e.source, "target": e.target}
             for e in graph.edges if e.source in ids and e.target in ids]
    filters = {
        "modules": [{"name": m, "color": module_color(m)} for m in sorted({n["module"] for n in nodes})],
        "types": [{"name": t} for t in sorted({n["type"] for n in nodes})],
        "applied": {"modules": sorted(modules_keep) if modules_keep is not None else None,
                    "types": sorted(types_keep) if types_keep is not None else None},
    }
    payload = canonical_json({"nodes": nodes, "edges": edges, "filters": filters})
    # keep the JSON from closing its <script> element early
    payload = payload.replace("<", "\\u003c").replace(">", "\\u003e").replace("&", "\\u0026")
    html = _HTML.substitute(title=_escape_html(title), data=payload)
    return VizDocument(html, tuple(nodes), tuple(edges), filters)


def _escape_html(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
