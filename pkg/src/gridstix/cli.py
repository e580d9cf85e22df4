"""``gridstix`` command-line tool.

Exit codes: 0 success, 1 validation errors, 2 usage or input error, 3 internal error.
Structured output goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence, TextIO

from . import __version__
from .export import EmptyGraphWarning, build_ir, export_schemas, export_viz
from .graph import (
    CycleError, GraphBuildError, MissingPatternProperty, UnknownPattern, UnknownRoot, UnknownSeed,
    attack_paths, build_graph, cascade_impact, protection_coverage, supply_chain_risk,
)
from .policy import (
    AccessRequest, ContextConflictError, PolicyError, UnknownContext, UnknownTarget, evaluate,
    rules_from_bundle,
)
from .redaction import ProfileConflictError, SharingProfile, ValidationPreconditionError, redact_bundle
from .schema import RegistryError, builtin_registry, load_registry
from .stix import Bundle, StixError, canonical_json, loads_document, parse_bundle, serialize_bundle
from .validator import MergeConflict, ValidatorConfig, merge_bundles, validate_bundle

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("gridstix")


class UsageError(Exception):
    """Bad arguments or unreadable input; exits 2."""


class InvalidBundle(Exception):
    def __init__(self, report):
        super().__init__("bundle failed validation")
        self.report = report


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _read_input(path: str | None) -> bytes:
    if path in (None, "-"):
        return sys.stdin.buffer.read()
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _load_bundle(path: str | None) -> Bundle:
    try:
        return parse_bundle(_read_input(path))
    except StixError as exc:
        raise UsageError(f"{path or '<stdin>'}: {exc}") from None


def _load_document(path: str) -> Any:
    try:
        return loads_document(_read_input(path))
    except StixError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _registry(args: argparse.Namespace):
    if args.registry:
        try:
            return load_registry(args.registry)
        except (OSError, RegistryError, StixError) as exc:
            raise UsageError(f"registry {args.registry}: {exc}") from None
    return builtin_registry()


def _checked_graph(args: argparse.Namespace, bundle: Bundle):
    registry = _registry(args)
    report = validate_bundle(bundle, registry, ValidatorConfig(allow_dangling=False))
    if not report.passed:
        raise InvalidBundle(report)
    return build_graph(bundle, registry)


def _emit(out: TextIO, args: argparse.Namespace, doc: dict[str, Any], text: str) -> None:
    out.write(canonical_json(doc) + "\n" if args.format == "structured" else text)


def _table(rows: list[tuple[str, ...]], header: tuple[str, ...]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    return "\n".join(lines) + "\n"


# -- subcommands ---------------------------------------------------------------------

def cmd_validate(args, out, err) -> int:
    bundles = [_load_bundle(p) for p in (args.bundles or ["-"])]
    try:
        bundle = merge_bundles(bundles)
    except MergeConflict as exc:
        raise UsageError(str(exc)) from None
    report = validate_bundle(bundle, _registry(args), ValidatorConfig(allow_dangling=args.allow_dangling))
    if args.format == "structured":
        out.write(report.to_json())
    else:
        out.write(report.render_text())
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_merge(args, out, err) -> int:
    try:
        merged = merge_bundles(_load_bundle(p) for p in args.bundles)
    except MergeConflict as exc:
        raise UsageError(str(exc)) from None
    Path(args.out).write_text(serialize_bundle(merged), encoding="utf-8")
    err.write(f"merged {len(args.bundles)} bundle(s), {len(merged)} object(s) -> {args.out}\n")
    return EXIT_OK


def cmd_cascade(args, out, err) -> int:
    graph = _checked_graph(args, _load_bundle(args.bundle))
    seeds = [s for s in args.seeds.split(",") if s]
    report = cascade_impact(graph, seeds, args.hops)
    rows = [(node, graph.nodes[node].type, f"{score:.6g}") for node, score in report.ranked()]
    _emit(out, args, report.to_dict(), _table(rows, ("node", "type", "impact")))
    return EXIT_OK


def cmd_supply_chain(args, out, err) -> int:
    graph = _checked_graph(args, _load_bundle(args.bundle))
    report = supply_chain_risk(graph, args.root)
    rows = [(n, graph.nodes[n].type, f"{r:.6g}", "shared" if n in report.shared_dependencies else "")
            for n, r in sorted(report.aggregate_risk.items(), key=lambda kv: (-kv[1], kv[0]))]
    text = _table(rows, ("component", "type", "risk", "note"))
    text += "\n" + _table([(s, f"{v:.6g}") for s, v in report.supplier_shares.items()], ("supplier", "share"))
    text += f"HHI: {'n/a' if report.hhi is None else format(report.hhi, '.6g')}\n"
    _emit(out, args, report.to_dict(), text)
    return EXIT_OK


def cmd_attack_paths(args, out, err) -> int:
    graph = _checked_graph(args, _load_bundle(args.bundle))
    kwargs = {"max_depth": args.max_depth}
    if args.traverse:
        kwargs["traversal_types"] = set(args.traverse.split(","))
    paths = attack_paths(graph, args.pattern, **kwargs)
    text = "".join(" -> ".join(n if via == "entry" else f"[{via}] {n}" for n, via in p.steps) + "\n"
                   for p in paths)
    text += f"{len(paths)} path(s)\n"
    _emit(out, args, {"pattern": args.pattern, "paths": [p.to_dict() for p in paths]}, text)
    return EXIT_OK


def cmd_protection(args, out, err) -> int:
    graph = _checked_graph(args, _load_bundle(args.bundle))
    unprotected = sorted(protection_coverage(graph))
    rows = [(n, graph.nodes[n].type) for n in unprotected]
    _emit(out, args, {"unprotected": unprotected},
          _table(rows, ("unprotected asset", "type")) if rows else "every asset is protected\n")
    return EXIT_OK


def cmd_policy_eval(args, out, err) -> int:
    assets = _load_bundle(args.bundle)
    rules_bundle = _load_bundle(args.rules)
    contexts_bundle = _load_bundle(args.contexts) if args.contexts else None
    parts = [assets] + ([contexts_bundle] if contexts_bundle else [])
    try:
        combined = merge_bundles(parts)
    except MergeConflict as exc:
        raise UsageError(str(exc)) from None
    graph = _checked_graph(args, combined)
    try:
        rules = rules_from_bundle(rules_bundle, graph)
        request = AccessRequest.from_dict(_load_document(args.request))
    except (PolicyError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    contexts = [o.id for o in contexts_bundle.objects] if contexts_bundle else []
    decision = evaluate(request, rules, graph, contexts)
    text = f"{decision.outcome}\n" + "".join(f"  {line}\n" for line in decision.rationale)
    _emit(out, args, {"request": request.to_dict(), "decision": decision.to_dict()}, text)
    return EXIT_OK


def cmd_redact(args, out, err) -> int:
    key = os.environ.get(args.key_env)
    if not key:
        raise UsageError(f"environment variable {args.key_env} is unset or empty")
    registry = _registry(args)
    try:
        profile = SharingProfile.from_dict(_load_document(args.profile), registry) if args.profile \
            else SharingProfile.default(registry)
    except (ProfileConflictError, TypeError) as exc:
        raise UsageError(f"profile: {exc}") from None
    try:
        redacted, mapping = redact_bundle(_load_bundle(args.bundle), profile, key.encode("utf-8"), registry)
    except ValidationPreconditionError as exc:
        raise InvalidBundle(exc.report) from None
    text = serialize_bundle(redacted)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    if args.map_out:
        Path(args.map_out).write_text(canonical_json(dict(sorted(mapping.items()))) + "\n", encoding="utf-8")
    err.write(f"pseudonymized {len(mapping)} object id(s)\n")
    return EXIT_OK


def cmd_export_schema(args, out, err) -> int:
    registry = _registry(args)
    written = export_schemas(build_ir(registry), args.out, registry)
    err.write(f"wrote {len(written)} file(s) to {args.out}\n")
    return EXIT_OK


def cmd_export_viz(args, out, err) -> int:
    graph = _checked_graph(args, _load_bundle(args.bundle))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyGraphWarning)
        doc = export_viz(graph, filter_modules=args.filter_module or None, filter_types=args.filter_type or None)
    for w in caught:
        err.write(f"warning: {w.message}\n")
    Path(args.out).write_text(doc.html, encoding="utf-8")
    err.write(f"{len(doc.nodes)} node(s), {len(doc.edges)} edge(s) -> {args.out}\n")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--registry", metavar="FILE", help="registry override document")
    common.add_argument("--format", choices=("text", "structured"), default="text")

    parser = _Parser(prog="gridstix", description="Grid threat intelligence toolkit.", parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log diagnostics to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", parents=[common], help="merge and validate bundles")
    p.add_argument("bundles", nargs="*", metavar="BUNDLE")
    p.add_argument("--allow-dangling", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("merge", parents=[common], help="merge bundles, latest version wins")
    p.add_argument("bundles", nargs="+", metavar="BUNDLE")
    p.add_argument("--out", required=True, metavar="FILE")
    p.set_defaults(func=cmd_merge)

    analyze = sub.add_parser("analyze", help="threat graph analytics").add_subparsers(
        dest="analysis", required=True, parser_class=_Parser)
    p = analyze.add_parser("cascade", parents=[common])
    p.add_argument("bundle", nargs="?")
    p.add_argument("--seeds", required=True, metavar="ID,ID")
    p.add_argument("--hops", type=int, default=6)
    p.set_defaults(func=cmd_cascade)
    p = analyze.add_parser("supply-chain", parents=[common])
    p.add_argument("bundle", nargs="?")
    p.add_argument("--root", required=True, metavar="ID")
    p.set_defaults(func=cmd_supply_chain)
    p = analyze.add_parser("attack-paths", parents=[common])
    p.add_argument("bundle", nargs="?")
    p.add_argument("--pattern", required=True, metavar="ID")
    p.add_argument("--max-depth", type=int, default=5)
    p.add_argument("--traverse", metavar="TYPE,TYPE", help="relationship types to walk")
    p.set_defaults(func=cmd_attack_paths)
    p = analyze.add_parser("protection", parents=[common])
    p.add_argument("bundle", nargs="?")
    p.set_defaults(func=cmd_protection)

    policy = sub.add_parser("policy", help="Zero Trust decisions").add_subparsers(
        dest="policy_command", required=True, parser_class=_Parser)
    p = policy.add_parser("eval", parents=[common])
    p.add_argument("bundle", nargs="?", help="asset bundle (stdin when omitted)")
    p.add_argument("--rules", required=True, metavar="FILE", help="bundle of policy objects")
    p.add_argument("--request", required=True, metavar="FILE")
    p.add_argument("--contexts", metavar="FILE", help="bundle of active context objects")
    p.set_defaults(func=cmd_policy_eval)

    p = sub.add_parser("redact", parents=[common], help="pseudonymize a bundle for sharing")
    p.add_argument("bundle", nargs="?")
    p.add_argument("--profile", metavar="FILE")
    p.add_argument("--key-env", required=True, metavar="VAR")
    p.add_argument("--out", metavar="FILE")
    p.add_argument("--map-out", metavar="FILE", help="write the pseudonym map here")
    p.set_defaults(func=cmd_redact)

    export = sub.add_parser("export", help="schema and visualization artifacts").add_subparsers(
        dest="export_command", required=True, parser_class=_Parser)
    p = export.add_parser("schema", parents=[common])
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_export_schema)
    p = export.add_parser("viz", parents=[common])
    p.add_argument("bundle", nargs="?")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--filter-module", action="append", metavar="MODULE")
    p.add_argument("--filter-type", action="append", metavar="TYPE")
    p.set_defaults(func=cmd_export_viz)
    return parser


def run(argv: Sequence[str] | None = None, out: TextIO | None = None, err: TextIO | None = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        err.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=err, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out, err)
    except InvalidBundle as exc:
        err.write(exc.report.render_text())
        return EXIT_INVALID
    except (UsageError, UnknownSeed, UnknownRoot, UnknownPattern, MissingPatternProperty, UnknownTarget,
            UnknownContext, ContextConflictError, CycleError, GraphBuildError, ValueError) as exc:
        err.write(f"gridstix: {exc}\n")
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        err.write(f"gridstix: internal error: {exc!r}\n")
        return EXIT_INTERNAL


def main(argv: Sequence[str] | None = None) -> int:
    return run(argv)
