"""ws_mean for 1..5 experts over several seeds on the desk set."""

import argparse
import json

import numpy as np
import torch

from moecalo.experiments import run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--experts", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out", default=None)
    args = p.parse_args()
    torch.set_num_threads(1)

    table = {}
    for n in args.experts:
        ws = []
        for s in args.seeds:
            r = run_desk(n, seed=s, epochs=args.epochs)
            ws.append(r.ws_mean)
            print(json.dumps(r.summary()), flush=True)
        table[n] = ws
        print(f"experts={n} ws_mean {np.mean(ws):.2f} +- {np.std(ws):.2f}", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(table, fh, indent=2)


if __name__ == "__main__":
    main()
