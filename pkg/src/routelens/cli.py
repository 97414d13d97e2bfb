"""Command-line front door.

Subcommands: ``analyze``, ``compare``, ``validate``, ``synth``,
``aggregate``. Exit codes: 0 ok, 1 usage error, 2 validation failure,
3 analysis infeasible. All outputs are UTF-8.
"""

from __future__ import annotations

import argparse
import json
import sys

from .report import (AnalysisConfig, AnalysisInfeasibleError, analyze, compare,
                     load_report, write_comparison)
from .synthetic import ScenarioSpec, gen_collapse_scenario, generate_trace
from .trace import (CHUNK_AGGREGATE, TOKEN_FULL_PROBS, TOKEN_TOPK_ONLY,
                    TraceError, convert_to_aggregate_file, read_trace)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="routelens",
                     description="Per-layer, per-language MoE routing diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="scan a trace file for invariant violations")
    p.add_argument("path")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic trace from a scenario spec")
    p.add_argument("--spec", required=True, help="scenario spec JSON file")
    p.add_argument("--out", required=True, help="output trace path")
    p.add_argument("--mode", default=TOKEN_FULL_PROBS,
                   choices=[TOKEN_FULL_PROBS, TOKEN_TOPK_ONLY, CHUNK_AGGREGATE])
    p.add_argument("--sidecar", default=None,
                   help="write per-chunk tokenization counts here (token modes)")
    p.add_argument("--sig-digits", type=int, default=None,
                   help="quantize full probabilities to this many significant digits")
    p.add_argument("--collapse-language", default=None,
                   help="plant a deep-layer collapse for this language")
    p.add_argument("--collapse-deep-fraction", type=float, default=0.2)
    p.add_argument("--collapse-m", type=int, default=8,
                   help="number of experts the collapsed window routes through")

    p = sub.add_parser("aggregate", help="convert a token-level trace to chunk aggregates")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sidecar", default=None,
                   help="tokenization-count sidecar to fold into chunk rows")

    p = sub.add_parser("analyze", help="run the diagnostics pipeline over trace files")
    p.add_argument("--trace", action="append", required=True, metavar="[NAME=]PATH[,PATH...]",
                   help="variant trace files; repeat for multiple variants")
    p.add_argument("--reference-language", required=True)
    p.add_argument("--target-language", action="append", default=None,
                   help="repeat for multiple targets; default: all non-reference")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--deep-fraction", type=float, default=0.2)
    p.add_argument("--baseline-range", default=None, metavar="START:END",
                   help="layer index range (into the layer list) for the baseline window")
    p.add_argument("--min-drop-bits", type=float, default=0.5)
    p.add_argument("--require-sd", dest="require_sd", action="store_true", default=True)
    p.add_argument("--no-require-sd", dest="require_sd", action="store_false")
    p.add_argument("--lsi-thresholds", default="0.05,0.1,0.15,0.2")
    p.add_argument("--lsi-default-threshold", type=float, default=0.1)
    p.add_argument("--split-trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emit", default="layer_csv,summary,gaps,categorization,controls")
    p.add_argument("--require-full-probs", action="store_true")
    p.add_argument("--min-share", type=float, default=0.0)
    p.add_argument("--sidecar", action="append", default=None, metavar="NAME=PATH",
                   help="tokenization sidecar for a variant's token trace")

    p = sub.add_parser("compare", help="delta report between two analysis reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--output-dir", required=True)
    return parser


def _parse_variant(spec: str, index: int):
    if "=" in spec:
        name, paths = spec.split("=", 1)
    else:
        name, paths = f"variant{index}", spec
    return name, [p for p in paths.split(",") if p]


def _cmd_validate(args) -> int:
    meta, records = read_trace(args.path)
    n = sum(1 for _ in records)
    if not args.quiet:
        print(f"ok: {args.path} ({meta.capture_mode}, {n} records, "
              f"N={meta.num_experts}, K={meta.top_k}, "
              f"{len(meta.moe_layers)} layers, languages={list(meta.languages)})")
    return EXIT_OK


def _cmd_synth(args) -> int:
    spec = ScenarioSpec.load(args.spec)
    if args.collapse_language:
        spec = gen_collapse_scenario(spec, args.collapse_deep_fraction,
                                     args.collapse_language, m=args.collapse_m)
    summary = generate_trace(spec, args.out, mode=args.mode,
                             sidecar=args.sidecar, sig_digits=args.sig_digits)
    print(json.dumps(summary))
    return EXIT_OK


def _cmd_aggregate(args) -> int:
    summary = convert_to_aggregate_file(args.input, args.out, sidecar=args.sidecar)
    print(json.dumps(summary))
    return EXIT_OK


def _cmd_analyze(args) -> int:
    variants = [_parse_variant(spec, i) for i, spec in enumerate(args.trace)]
    baseline_range = None
    if args.baseline_range:
        try:
            start, end = args.baseline_range.split(":")
            baseline_range = (int(start), int(end))
        except ValueError as exc:
            raise _UsageError(f"bad --baseline-range '{args.baseline_range}': "
                              "expected START:END") from exc
    sidecars = {}
    for item in args.sidecar or []:
        if "=" not in item:
            raise _UsageError(f"bad --sidecar '{item}': expected NAME=PATH")
        name, path = item.split("=", 1)
        sidecars[name] = path
    try:
        thresholds = tuple(float(x) for x in args.lsi_thresholds.split(",") if x)
    except ValueError as exc:
        raise _UsageError(f"bad --lsi-thresholds '{args.lsi_thresholds}'") from exc
    config = AnalysisConfig(
        variants=variants,
        reference_language=args.reference_language,
        target_languages=args.target_language,
        output_dir=args.output_dir,
        deep_fraction=args.deep_fraction,
        baseline_range=baseline_range,
        min_drop_bits=args.min_drop_bits,
        require_sd=args.require_sd,
        lsi_thresholds=thresholds,
        lsi_default_threshold=args.lsi_default_threshold,
        split_trials=args.split_trials,
        seed=args.seed,
        emit=tuple(x for x in args.emit.split(",") if x),
        require_full_probs=args.require_full_probs,
        min_share=args.min_share,
        sidecars=sidecars,
    )
    try:
        config.validate()
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc
    report, written = analyze(config)
    if written:
        for path in written:
            print(f"wrote {path}")
    else:
        print(json.dumps(report, indent=2, allow_nan=False))
    return EXIT_OK


def _cmd_compare(args) -> int:
    comparison = compare(load_report(args.report_a), load_report(args.report_b))
    for path in write_comparison(comparison, args.output_dir):
        print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handlers = {
        "validate": _cmd_validate,
        "synth": _cmd_synth,
        "aggregate": _cmd_aggregate,
        "analyze": _cmd_analyze,
        "compare": _cmd_compare,
    }
    try:
        return handlers[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TraceError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except AnalysisInfeasibleError as exc:
        print(f"analysis infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except FileNotFoundError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
