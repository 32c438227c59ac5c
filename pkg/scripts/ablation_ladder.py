"""Source-only and Models I/II/III on the default moons task, with A-distances."""

import argparse

import numpy as np

from fada import experiments as E
from fada import federation as F


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    print("preset,seed,final_acc,tail20_acc,a_distance")
    means = {}
    for preset in ("source_only", "I", "II", "III"):
        finals = []
        for seed in args.seeds:
            art = F.run(E.moons_config(seed, preset, rounds=args.rounds), jobs=args.jobs)
            accs = [r.target_acc for r in art.records]
            finals.append(accs[-1])
            print(f"{preset},{seed},{accs[-1]:.4f},{np.mean(accs[-20:]):.4f},{E.pooled_a_distance(art, seed):.4f}",
                  flush=True)
        means[preset] = float(np.mean(finals))
    print("# mean final accuracy: " + " ".join(f"{k}={v:.4f}" for k, v in means.items()))


if __name__ == "__main__":
    main()
