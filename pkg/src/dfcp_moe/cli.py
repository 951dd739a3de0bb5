"""Command-line entry point.

Every subcommand recomputes the upstream stages it needs from the config (they
are deterministic), then writes its own artifacts to ``--out``.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 purity-floor abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pp

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_PURITY = 0, 2, 3, 4


def _common() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand without clobbering each other
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value experiment file")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: out)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="experiment seed override")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    p.add_argument("--precompute-experts", action="store_true", default=argparse.SUPPRESS,
                   help="charge every expert's first layer in the flop/latency report")
    p.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="dfcp-moe", parents=[common],
                                     description="Clustered, pseudo-labeled mixture-of-experts experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("extract", parents=[common], help="write train/test feature CSVs")
    sub.add_parser("cluster", parents=[common], help="first-stage k-means and its DBI")
    sub.add_parser("refine", parents=[common], help="second-stage refinement with threshold sweep")
    sub.add_parser("pseudo-label", parents=[common], help="Siamese encoder, tau*, labels and purity")
    s = sub.add_parser("search", parents=[common], help="random hyperparameter search")
    s.add_argument("--kind", choices=pp.MODEL_KINDS, action="append")
    t = sub.add_parser("train", parents=[common], help="train one model and save its checkpoint")
    t.add_argument("--kind", choices=pp.MODEL_KINDS, required=True)
    e = sub.add_parser("evaluate", parents=[common], help="train and evaluate on the held-out split")
    e.add_argument("--kind", choices=pp.MODEL_KINDS, action="append")
    sub.add_parser("run", parents=[common], help="full pipeline with every report and checkpoint")
    sub.add_parser("report", parents=[common], help="re-emit comparison tables from <out>/reports.json")
    return parser


def resolve_config(args) -> pp.ExperimentConfig:
    path = getattr(args, "config", None)
    cfg = pp.load_config(path) if path else pp.benchmark_config()
    if getattr(args, "set", None):
        items = {}
        for item in args.set:
            if "=" not in item:
                raise pp.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            items[k.strip()] = v.strip()
        pp.apply_overrides(cfg, items)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "precompute_experts", False):
        cfg.report.precompute_experts = True
    return cfg.validate()


def _print_comparison(path: Path) -> None:
    table = pp.read_comparison_csv(path)
    models = list(next(iter(table.values())).keys())
    print("metric".ljust(20) + "".join(m.rjust(18) for m in models))
    for metric, row in table.items():
        cells = ["-" if row[m] is None else f"{row[m]:.6g}" for m in models]
        print(metric.ljust(20) + "".join(c.rjust(18) for c in cells))


def _dispatch(args, cfg: pp.ExperimentConfig, out: Path) -> None:
    cmd = args.command
    if cmd == "report":
        reports = pp.load_reports(out / "reports.json")
        pp.emit_report(reports, out)
        _print_comparison(out / "comparison.csv")
        return
    p = pp.Pipeline(cfg)
    if cmd in ("extract", "cluster", "refine", "pseudo-label"):
        for f in pp.write_stage_outputs(p, out, cmd):
            print(f)
        if cmd == "pseudo-label":
            print(p.purity.table())
            p.check_purity()
        return
    if cmd == "search":
        out.mkdir(parents=True, exist_ok=True)
        for kind in args.kind or pp.MODEL_KINDS:
            res = p.search(kind)
            path = out / f"search_{kind}.json"
            pp._dump_json(res.to_dict(), path)
            print(f"{kind}: best validation balanced accuracy {res.best_score:.4f} -> {path}")
        return
    if cmd == "train":
        print(pp.save_checkpoint(p, args.kind, out))
        return
    if cmd == "evaluate":
        out.mkdir(parents=True, exist_ok=True)
        for kind in args.kind or pp.MODEL_KINDS:
            rep = p.evaluate(kind)
            pp._dump_json(rep.to_dict(), out / f"evaluation_{kind}.json")
            print(f"{rep.kind}: mAP {rep.mAP:.4f} balanced accuracy {rep.balanced_accuracy:.4f} "
                  f"flops {rep.flops} params {rep.params}")
        return
    if cmd == "run":
        pp.run_pipeline(cfg, out)
        _print_comparison(out / "comparison.csv")
        return
    raise AssertionError(cmd)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(getattr(args, "out", "out"))
    try:
        cfg = resolve_config(args)
        _dispatch(args, cfg, out)
    except pp.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pp.PurityError as exc:
        print(f"purity abort: {exc}", file=sys.stderr)
        return EXIT_PURITY
    except pp.StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"stage '{args.command}' failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
