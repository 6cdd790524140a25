"""Loss scale-factor sweep plus the gradually-increasing schedule run.

Usage:
    python scripts/run_scale_sweep.py --workdir runs/sweep \
        [--values 1,5,10,15,20,40] [--iterations 300]
"""

import argparse
import sys
from pathlib import Path

from starbrinet.cli import main as cli


def run(argv):
    print("+ starbrinet " + " ".join(argv))
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/sweep")
    ap.add_argument("--values", default="1,5,10,15,20,40")
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--count", type=int, default=480)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.workdir)
    data = work / "data"
    work.mkdir(parents=True, exist_ok=True)
    run(["gen-data", "--out", str(data), "--profile", "desk",
         "--seed", str(args.seed), "--count", str(args.count)])
    run(["sweep-scale", "--data", str(data), "--values", args.values,
         "--iterations", str(args.iterations), "--seed", str(args.seed),
         "--schedule", f"1:40:{args.iterations}",
         "--out", str(work / "sweep.csv")])
    print(f"\nsweep table -> {work / 'sweep.csv'}")


if __name__ == "__main__":
    main()
