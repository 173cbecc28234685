"""Router-weight grid (default row plus one-at-a-time changes) on the desk set."""

import argparse
import json

import torch

from moecalo.cli import LAMBDA_GRID
from moecalo.experiments import run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out", default=None)
    args = p.parse_args()
    torch.set_num_threads(1)

    rows = []
    for lu, ld in LAMBDA_GRID:
        for s in args.seeds:
            r = run_desk(3, lu, ld, s, epochs=args.epochs)
            rows.append(r.summary())
            print(f"util={lu:g} diff={ld:g} seed={s}: ws {r.ws_mean:.2f} purity {r.purity:.3f} "
                  f"min util {r.min_util:.3f} min gap {r.min_gap:.1f}", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
