"""Command line: run <config>, list, fixtures."""

from __future__ import annotations

import argparse
import logging
import sys

import yaml

from .experiments import ExperimentConfig, ExperimentError, list_experiments, regen_fixtures, run_experiment


def _override(cfg: dict, assignment: str):
    """Apply key.sub=value (value parsed as YAML) to a nested config mapping."""
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ExperimentError(f"override {assignment!r} is not key=value")
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if isinstance(node, list):
            node = node[int(p)]
        else:
            node = node.setdefault(p, {})
    last = parts[-1]
    value = yaml.safe_load(raw)
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="martingale-pe", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--output-dir")
    r.add_argument("--report-only", action="store_true", help="exit 0 even when acceptance rows fail")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set repetitions=10 --set runs.0.schedule.alpha0=0.02")
    sub.add_parser("list", help="list experiment ids")
    f = sub.add_parser("fixtures", help="recompute the oracle fixtures file")
    f.add_argument("--path")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")

    if args.command == "list":
        for e in list_experiments():
            print(f"{e['id']:22s} {e['description']}\n{'':22s} reproduces: {e['reproduces']}")
        return 0
    if args.command == "fixtures":
        data = regen_fixtures(args.path)
        for k, v in data["oracles"].items():
            print(f"{k:24s} {v['value']}  ({v['provenance']}, tol {v['tolerance']:.2g})")
        return 0

    try:
        with open(args.config) as fh:
            raw = yaml.safe_load(fh)
        for a in args.set:
            _override(raw, a)
        cfg = ExperimentConfig.from_dict(raw)
        cfg.validate()
        report = run_experiment(cfg, output_dir=args.output_dir)
    except (ExperimentError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(report.to_text())
    if report.passed or args.report_only:
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
