"""Desk-scale benchmark: generate data, train the full model, evaluate it
against the persistence baseline, and export a sample prediction.

Usage:
    python scripts/run_desk_benchmark.py --workdir runs/desk [--iterations 2000]
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
    ap.add_argument("--workdir", default="runs/desk")
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--count", type=int, default=480)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.workdir)
    data = work / "data"
    ckpt = work / "model.sbck"
    work.mkdir(parents=True, exist_ok=True)

    run(["gen-data", "--out", str(data), "--profile", "desk",
         "--seed", str(args.seed), "--count", str(args.count)])
    run(["train", "--data", str(data), "--out", str(ckpt),
         "--iterations", str(args.iterations), "--seed", str(args.seed)])
    run(["eval", "--ckpt", str(ckpt), "--data", str(data),
         "--report", str(work / "eval.csv")])
    run(["predict", "--ckpt", str(ckpt),
         "--input", str(data / "test_00000.rseq"),
         "--out", str(work / "pred_00000.rseq"),
         "--preview-dir", str(work / "previews")])
    print(f"\nartifacts in {work}: model.sbck, eval.csv, pred_00000.rseq, previews/")


if __name__ == "__main__":
    main()
