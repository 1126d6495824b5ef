#!/usr/bin/env python3
"""Run the schedule ablation suite against a preprocessed dataset.

Wraps `maskrec ablate`; see the README for the list of arms. The dataset
directory must contain catalog.csv, windows.csv, and split.csv (as written by
`maskrec preprocess` or scripts/run_synthetic_experiment.py).
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from maskrec.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--suite", choices=["full", "orders"], default="full")
    ap.add_argument("--max-steps", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    raise SystemExit(cli([
        "ablate", "--dataset", args.dataset, "--out", args.out,
        "--suite", args.suite, "--force",
        "--d-model", "32", "--n-heads", "4", "--n-layers", "4",
        "--ffn-dim", "64", "--max-seq-len", "96",
        "--n-shallow", "1", "--n-deep", "1",
        "--max-steps", str(args.max_steps), "--eval-every", "100",
        "--patience", "2", "--seed", str(args.seed),
    ]))


if __name__ == "__main__":
    main()
