"""Run every shipped experiment config and print a combined PASS/FAIL table.

    python scripts/run_all_experiments.py [--only ex1 ex4] [--results results]
"""

import argparse
import sys
from pathlib import Path

from martingale_pe.experiments import run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--only", nargs="*", help="config stems to run (default: all)")
    ap.add_argument("--results", default="results", help="parent directory for per-experiment outputs")
    args = ap.parse_args(argv)

    paths = sorted(CONFIGS.glob("*.yaml"))
    if args.only:
        paths = [p for p in paths if p.stem in args.only]
    failed = []
    for p in paths:
        rep = run_experiment(p, output_dir=Path(args.results) / p.stem)
        print(rep.to_text(), flush=True)
        failed += [f"{p.stem}.{r.label}" for r in rep.rows if r.passed is False]
    print(f"\n{len(paths)} experiments, {len(failed)} failed rows" + (": " + ", ".join(failed) if failed else ""))
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
