"""Directional ablations on the synthetic desk benchmark.

Trains the full model, the MSE-only objective, the single-column variant,
and the bridge-free variant at matched iterations, then prints a comparison
table (test MSE, CSI, heavy-class CSI, persistence reference).

Usage:
    python scripts/run_ablations.py --workdir runs/ablations [--iterations 2000]
"""

import argparse
import csv
import sys
from pathlib import Path

from starbrinet.cli import main as cli

VARIANTS = {
    "full": [],
    "mse_only": ["--loss", "mse"],
    "single_column": ["--single-column"],
    "no_bridge": ["--no-bridge"],
}


def run(argv):
    print("+ starbrinet " + " ".join(argv))
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def read_report(path):
    with open(path) as fh:
        rows = [row for row in csv.DictReader(
            line for line in fh if not line.startswith("#"))]
    return rows[-1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/ablations")
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--count", type=int, default=480)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.workdir)
    data = work / "data"
    work.mkdir(parents=True, exist_ok=True)
    run(["gen-data", "--out", str(data), "--profile", "desk",
         "--seed", str(args.seed), "--count", str(args.count)])

    reports = {}
    for name, extra in VARIANTS.items():
        ckpt = work / f"{name}.sbck"
        run(["train", "--data", str(data), "--out", str(ckpt),
             "--iterations", str(args.iterations), "--seed", str(args.seed),
             "--eval-interval", "0", *extra])
        report = work / f"{name}.eval.csv"
        run(["eval", "--ckpt", str(ckpt), "--data", str(data),
             "--report", str(report)])
        reports[name] = read_report(report)

    print(f"\n{'variant':14s} {'mse':>9s} {'csi':>7s}")
    for name, row in reports.items():
        print(f"{name:14s} {float(row['mse']):9.4f} {float(row['csi']):7.4f}")
    ref = reports["full"]
    print(f"{'persistence':14s} {float(ref['persistence_mse']):9.4f} "
          f"{float(ref['persistence_csi']):7.4f}")


if __name__ == "__main__":
    main()
