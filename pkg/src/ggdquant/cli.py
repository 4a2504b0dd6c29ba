"""``ggdquant`` command-line driver.

Exit codes: 0 success, 1 quantization-domain error, 2 I/O, parse or usage error.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import fixture, formats, pipeline
from .bft import BftConfig, run_bft
from .errors import DegenerateStatsError, FormatError, ModelError, QuantDomainError
from .netsim import (
    accumulate_calibration,
    activation_points,
    capture_activations,
    capture_calibration,
)

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_IO = 2


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _layer_bw(text: str):
    name, sep, bw = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected NAME=BW, got {text!r}")
    try:
        return name, int(bw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bit width must be an integer in {text!r}") from None


def _weights(text: str):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _fmt_db(v) -> str:
    if v is None:
        return "-"
    if math.isinf(v):
        return "inf"
    return f"{v:.2f}"


def _print_summary(report: dict, out=None) -> None:
    out = out or sys.stdout
    print(f"scheme: {report['scheme']}", file=out)
    print(f"{'layer':<10} {'w fl/bw':>8} {'fm fl/bw':>9} {'w SQNR':>8} {'fm SQNR':>8}", file=out)
    for rec in report["layers"]:
        w = f"{rec['weight_fl']}/{rec['weight_bw']}" if "weight_fl" in rec else "-"
        fm = f"{rec['fm_fl']}/{rec['fm_bw']}" if rec.get("fm_bw") is not None else "float"
        fm_db = rec.get("fm_sqnr_network_db", rec.get("fm_sqnr_db"))
        print(f"{rec['layer']:<10} {w:>8} {fm:>9} {_fmt_db(rec.get('weight_sqnr_db')):>8} {_fmt_db(fm_db):>8}", file=out)
    if report.get("promotion"):
        p = report["promotion"]
        print(
            f"promoted: weights {p['weights_ratio_percent']:.1f}% {p['weights']}, "
            f"fm {p['fm_ratio_percent']:.1f}% {p['fm']}",
            file=out,
        )
    if report.get("network"):
        net = report["network"]
        print(f"top1_agreement: {net['top1_agreement']:.4f} ({net['eval_set']['count']} inputs)", file=out)


# -- subcommands -------------------------------------------------------------------------


def cmd_gen_fixture(args) -> int:
    out = Path(args.out)
    model = fixture.reference_model(args.seed)
    formats.write_model(model, out / "model.json")
    formats.write_dataset(
        fixture.synthetic_inputs(args.calib_size, args.seed, "calibration"), out / "calib.json", label=f"calibration seed={args.seed}"
    )
    formats.write_dataset(
        fixture.synthetic_inputs(args.eval_size, args.seed, "evaluation"), out / "eval.json", label=f"evaluation seed={args.seed}"
    )
    print(f"wrote fixture (seed {args.seed}) to {out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    model = formats.read_model(args.model)
    inputs, _ = formats.read_dataset(args.calib)
    accs = accumulate_calibration(model, inputs)
    stats, degenerate = {}, {}
    for name, acc in accs.items():
        try:
            stats[name] = acc.finalize(layer=name)
        except DegenerateStatsError as exc:
            degenerate[name] = str(exc)
            print(f"warning: {exc}", file=sys.stderr)
    formats.write_doc(args.out, formats.stats_to_doc(stats, degenerate, order=list(accs)))
    return EXIT_OK


def _bit_widths(args) -> pipeline.BitWidths:
    return pipeline.BitWidths(
        weights=args.bw_weights,
        fm=args.bw_fm,
        bias=args.bw_bias,
        weight_overrides=dict(args.weight_bw_layer or []),
        fm_overrides=dict(args.fm_bw_layer or []),
    )


def _load_stats(path, model):
    stats, degenerate = formats.stats_from_doc(formats.read_doc(path, formats.STATS), str(path))
    missing = [n for n in activation_points(model) if n not in stats and n not in degenerate]
    if missing:
        raise FormatError(f"{path}: no statistics for {missing}")
    return stats, degenerate


def cmd_quantize(args) -> int:
    model = formats.read_model(args.model)
    stats, degenerate = _load_stats(args.stats, model)
    if degenerate and args.scheme != "wq":
        name = next(iter(degenerate))
        raise DegenerateStatsError(degenerate[name])
    activations = None
    if args.calib:
        calib, _ = formats.read_dataset(args.calib)
        activations = capture_activations(model, calib)
    weights_from = formats.read_config(args.weights_from) if args.weights_from else None
    result = pipeline.quantize_network(
        model,
        stats,
        activations,
        args.scheme,
        _bit_widths(args),
        mode=args.mode,
        k_w=args.k_w,
        weights_from=weights_from,
        sqnr_floor_weights=args.sqnr_floor_weights,
        sqnr_floor_fm=args.sqnr_floor_fm,
        fallback_bw=args.fallback_bw,
    )
    eval_inputs, eval_label = (None, "")
    if args.eval:
        eval_inputs, eval_label = formats.read_dataset(args.eval)
    report = pipeline.build_report(
        model, result.config, stats, activations, eval_inputs, eval_label, promoted=result
    )
    formats.write_doc(args.out, formats.config_to_doc(result.config))
    if args.report:
        formats.write_doc(args.report, formats.report_to_doc(report))
    _print_summary(report)
    return EXIT_OK


def cmd_bft(args) -> int:
    model = formats.read_model(args.model)
    q = formats.read_config(args.config)
    eval_inputs, _ = formats.read_dataset(args.eval)
    target = {"weights": "weights", "fm": "feature_maps", "both": "both"}[args.target]
    cfg = BftConfig(window=args.window, target=target, metric_weights=args.metric_weights)
    tuned, trace = run_bft(model, q, eval_inputs, cfg)
    if args.target == "both":
        tag = pipeline.tag_after_bft(pipeline.tag_after_bft(tuned.scheme, "weights"), "feature_maps")
    else:
        tag = pipeline.tag_after_bft(tuned.scheme, target)
    tuned = replace(tuned, scheme=tag)
    formats.write_doc(args.out, formats.config_to_doc(tuned))
    if args.trace:
        formats.write_doc(args.trace, formats.trace_to_doc(trace))
    changed = len(trace.changes())
    verdict = "config unchanged" if changed == 0 else f"{changed} FL change(s)"
    print(f"objective {trace.initial_score:.4f} -> {trace.final_score:.4f}; {verdict}; scheme {tag}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = formats.read_model(args.model)
    q = formats.read_config(args.config)
    eval_inputs, label = formats.read_dataset(args.eval)
    stats = activations = None
    if args.calib:
        calib, _ = formats.read_dataset(args.calib)
        stats = capture_calibration(model, calib)
        activations = capture_activations(model, calib)
    report = pipeline.build_report(model, q, stats, activations, eval_inputs, label)
    if args.out:
        formats.write_doc(args.out, formats.report_to_doc(report))
    _print_summary(report)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ggdquant", description="Post-training fixed-point quantization of CNNs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixture", help="write the seeded reference network and datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calib-size", type=int, default=256)
    p.add_argument("--eval-size", type=int, default=1000)
    p.set_defaults(func=cmd_gen_fixture)

    p = sub.add_parser("stats", help="collect zero-excluded activation statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True, help="calibration dataset manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("quantize", help="design a fixed-point configuration")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--scheme", required=True, choices=pipeline.SCHEMES)
    p.add_argument("--bw-weights", type=int, default=8)
    p.add_argument("--bw-fm", type=int, default=8)
    p.add_argument("--bw-bias", type=int, default=None, help="defaults to --bw-weights")
    p.add_argument("--weight-bw-layer", type=_layer_bw, action="append", metavar="NAME=BW")
    p.add_argument("--fm-bw-layer", type=_layer_bw, action="append", metavar="NAME=BW")
    p.add_argument("--mode", choices=("default", "fast"), default="default")
    p.add_argument("--k-w", type=_positive_int, default=2, help="weight FL candidates to score")
    p.add_argument("--calib", help="calibration dataset (needed by default mode and fm SQNR)")
    p.add_argument("--eval", help="evaluation dataset for network metrics in the report")
    p.add_argument("--weights-from", help="reuse weight/bias FLs from this config")
    p.add_argument("--sqnr-floor-weights", type=float, metavar="DB")
    p.add_argument("--sqnr-floor-fm", type=float, metavar="DB")
    p.add_argument("--fallback-bw", type=int, default=8)
    p.add_argument("--out", required=True, help="config output path")
    p.add_argument("--report", help="report output path")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("bft", help="backward-forward tuning of fractional lengths")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--window", type=_positive_int, default=1)
    p.add_argument("--target", choices=("weights", "fm", "both"), default="fm")
    p.add_argument("--metric-weights", type=_weights, default=(1.0, 0.0), help="top-1,top-5 weights")
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_bft)

    p = sub.add_parser("evaluate", help="per-layer SQNR and top-1 agreement of a config")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--calib", help="adds isolated fm SQNR and distortion columns")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (QuantDomainError, ModelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
