"""Shuffle one source's labels and watch its attention weight over the rounds."""

import argparse
import csv
import sys

from fada import experiments as E


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=50)
    ap.add_argument("--shuffled", type=int, default=1, help="index of the source with permuted labels")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--weights-csv", help="write seed,round,source,weight rows here")
    args = ap.parse_args()
    rows, passed = [], 0
    for seed in range(args.seeds):
        tr = E.attention_trial(seed, args.shuffled, args.rounds, args.jobs)
        passed += tr.suppressed
        print(f"seed {seed}: late weight {tr.late_weight():.4f} (threshold {tr.threshold:.4f}) "
              f"{'suppressed' if tr.suppressed else 'NOT suppressed'}; final target acc {tr.final_accuracy:.3f}")
        rows += [(seed, r + 1, i, w) for r, ws in enumerate(tr.weights) for i, w in enumerate(ws)]
    print(f"{passed}/{args.seeds} seeds suppressed the shuffled source")
    if args.weights_csv:
        with open(args.weights_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "round", "source", "weight"])
            w.writerows(rows)
    return 0 if passed >= 0.8 * args.seeds else 1


if __name__ == "__main__":
    sys.exit(main())
