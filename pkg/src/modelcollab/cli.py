"""Command-line entry point: run, compare, estimate-cost, emergence, leave-one-out.

Exit codes: 0 success, 1 other error, 2 configuration error, 3 degraded run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .costmodel import cost_table_json, format_cost_table
from .errors import ArgumentError, CollabError, ConfigError
from .runner import (RunConfig, compare_runs, emergence_from_manifests, estimate_cost, load_manifest,
                     run_experiment, run_leave_one_out)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DEGRADED = 0, 1, 2, 3


def _emit_json(payload: str, dest: str | None) -> None:
    if dest is None:
        return
    if dest == "-":
        print(payload)
    else:
        Path(dest).write_text(payload + "\n", encoding="utf-8")


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config, seed=args.seed, max_concurrency=getattr(args, "max_concurrency", None),
                          output_dir=getattr(args, "output_dir", None))


def cmd_run(args) -> int:
    res = run_experiment(_load_config(args), resume=args.resume)
    s = res.manifest["summary"]
    print(f"{s['label']} on {s['dataset']}: score {s['score']:.4f} over {s['n_instances']} instances "
          f"({s['n_failed']} failed) -> {res.run_dir}")
    if res.exit_code == EXIT_DEGRADED:
        print("run degraded: more than 10% of instances failed", file=sys.stderr)
    return res.exit_code


def cmd_compare(args) -> int:
    comp = compare_runs([load_manifest(p) for p in args.manifests])
    print(comp.to_text())
    _emit_json(json.dumps(comp.to_json(), indent=2, sort_keys=True), args.json)
    return EXIT_OK


def cmd_cost(args) -> int:
    rows, params = estimate_cost(_load_config(args), args.methods or None)
    print(format_cost_table(rows))
    _emit_json(cost_table_json(rows, params), args.json)
    return EXIT_OK


def cmd_emergence(args) -> int:
    rates = emergence_from_manifests([load_manifest(p) for p in args.manifests])
    for label, rate in rates.items():
        shown = "n/a (every instance solved by some model)" if rate is None else f"{rate:.4f}"
        print(f"{label}: {shown}")
    _emit_json(json.dumps(rates, indent=2, sort_keys=True), args.json)
    return EXIT_OK


def cmd_loo(args) -> int:
    report = run_leave_one_out(_load_config(args))
    for mid, score in zip(report["omitted"], report["scores"]):
        print(f"without {mid}: {'failed' if score is None else f'{score:.4f}'}")
    print(f"mean {report['mean']:.4f}  std {report['std']:.4f} (sample)  {report['std_population']:.4f} (population)")
    _emit_json(json.dumps(report, indent=2, sort_keys=True), args.json)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modelcollab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="run configuration (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = with_config(sub.add_parser("run", help="execute one configured run"))
    p.add_argument("--resume", action="store_true", help="continue after the last complete record")
    p.add_argument("--max-concurrency", type=int, dest="max_concurrency")
    p.add_argument("--output-dir", dest="output_dir", help="override the config's output directory")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("compare", help="per-domain comparison against the best single-model run")
    p.add_argument("manifests", nargs="+", help="manifest.json files or run directories")
    p.add_argument("--json", metavar="PATH", help="also write JSON ('-' for stdout)")
    p.set_defaults(fn=cmd_compare)

    p = with_config(sub.add_parser("estimate-cost", help="training/inference FLOPs per method"))
    p.add_argument("--methods", nargs="*", help="restrict the table to these method ids")
    p.add_argument("--json", metavar="PATH", help="also write JSON ('-' for stdout)")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("emergence", help="share of individually unsolvable instances a system solves")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--json", metavar="PATH")
    p.set_defaults(fn=cmd_emergence)

    p = with_config(sub.add_parser("leave-one-out", help="score spread when each pool member is omitted"))
    p.add_argument("--max-concurrency", type=int, dest="max_concurrency")
    p.add_argument("--json", metavar="PATH")
    p.set_defaults(fn=cmd_loo)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArgumentError, CollabError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
