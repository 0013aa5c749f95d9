"""Command-line entry point (``emeralds <subcommand>``).

Exit codes: 0 success, 2 validation failure, 3 backend failure,
4 metric undefined.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .errors import (
    BackendUnavailable,
    EmeraldsError,
    EmptyDenominator,
    MalformedResponse,
    OneClassOnly,
)
from .pipeline import (
    Report,
    _jsonable,
    cmd_ablate,
    cmd_cade_eval,
    cmd_cadx_eval,
    cmd_cadx_train,
    cmd_emr_gen,
    cmd_plot_roc,
    load_config,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BACKEND = 3
EXIT_UNDEFINED = 4


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value config file "
                   "(default: $EMERALDS_CONFIG)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, dest="out_dir", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emeralds", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cade-eval", help="score detection masks against ground truth")
    _common(p)
    p.add_argument("--backend", choices=("file", "toy"))
    p.add_argument("--backend-dir", type=Path)

    p = sub.add_parser("emr-gen", help="generate synthetic EMRs and check their biases")
    _common(p)
    p.add_argument("--emr-config", type=Path)

    for name, helptext in (("cadx-train", "cross-validate and fit the malignancy classifier"),
                           ("cadx-eval", "apply a saved classifier"),
                           ("ablate", "sweep the number of radiomic features")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--emr-config", type=Path)
        p.add_argument("--no-emr", action="store_true", help="drop EMR columns")
        if name == "cadx-train":
            p.add_argument("--k", type=int, dest="k_features")
        if name == "cadx-eval":
            p.add_argument("--model", type=Path, required=True)
        if name == "ablate":
            p.add_argument("--k-list", default="1,2,3,4,5,6,7")

    p = sub.add_parser("plot-roc", help="draw ROC curves from report files")
    _common(p)
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--svg", type=Path, help="output file (default: <out>/roc.svg)")

    p = sub.add_parser("make-phantom", help="write the synthetic phantom dataset")
    p.add_argument("root", type=Path)
    p.add_argument("--scans", type=int, default=150)
    p.add_argument("--nodules-per-scan", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args):
    overrides = {k: getattr(args, k, None) for k in
                 ("seed", "out_dir", "backend", "backend_dir", "emr_config", "k_features")}
    if getattr(args, "no_emr", False):
        overrides["use_emr"] = False
    return load_config(args.config, **overrides)


def _print(report: Report):
    print(json.dumps(_jsonable({"stage": report.stage, "metrics": report.metrics}),
                     sort_keys=True))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "make-phantom":
        from .synthetic import write_phantom_dataset
        summary = write_phantom_dataset(args.root, args.scans, args.nodules_per_scan,
                                        seed=args.seed)
        print(json.dumps(summary, sort_keys=True))
        return EXIT_OK

    cfg = _config(args)
    if args.command == "cade-eval":
        report = cmd_cade_eval(cfg)
        _print(report)
        return EXIT_UNDEFINED if report.has_undefined_metric() else EXIT_OK
    if args.command == "emr-gen":
        report, ok = cmd_emr_gen(cfg)
        _print(report)
        return EXIT_OK if ok else EXIT_VALIDATION
    if args.command == "cadx-train":
        report = cmd_cadx_train(cfg)
    elif args.command == "cadx-eval":
        report = cmd_cadx_eval(cfg, args.model)
    elif args.command == "ablate":
        try:
            k_list = [int(k) for k in args.k_list.split(",") if k.strip()]
        except ValueError:
            print(f"error: bad --k-list {args.k_list!r}", file=sys.stderr)
            return EXIT_VALIDATION
        report = cmd_ablate(cfg, k_list)
        _print(report)
        return EXIT_OK
    else:  # plot-roc
        reports = [(p.stem, Report.read(p)) for p in args.reports]
        svg_path = args.svg or Path(cfg.out_dir) / "roc.svg"
        cmd_plot_roc(reports, svg_path)
        print(str(svg_path))
        return EXIT_OK
    _print(report)
    return EXIT_UNDEFINED if report.has_undefined_metric() else EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except (BackendUnavailable, MalformedResponse) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (EmptyDenominator, OneClassOnly) as exc:
        print(f"metric undefined: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED
    except (EmeraldsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
