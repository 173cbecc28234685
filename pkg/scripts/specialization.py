"""Train 3 experts on the 3-mode desk set and report routing against the modes.

Also reruns with the differentiation term switched off for comparison.
"""

import argparse
import json

import torch

from moecalo.experiments import run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out", default=None, help="optional JSON output path")
    args = p.parse_args()
    torch.set_num_threads(1)

    rows = []
    for ld in (1e-4, 0.0):
        r = run_desk(3, 0.01, ld, args.seed, epochs=args.epochs)
        row = {**r.summary(), "ordering_recovered": r.ordering_recovered, "majority_mode": r.majority_mode}
        rows.append(row)
        print(json.dumps(row))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
