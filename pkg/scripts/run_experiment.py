"""Run the strategy comparison from a JSON config and print the summary table.

    python3 scripts/run_experiment.py configs/acceptance.json --output-dir runs/acceptance
"""

import argparse
import sys

from serinv import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", help="experiment config JSON")
    ap.add_argument("--output-dir", default="runs/experiment")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    argv = ["experiment", "--config", args.config, "--output-dir", args.output_dir]
    if args.workers:
        argv += ["--workers", str(args.workers)]
    status = cli.run(argv)
    if status == 0:
        with open(f"{args.output_dir}/summary.csv", encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
    return status


if __name__ == "__main__":
    sys.exit(main())
