"""Inference time of a 3-expert mixture against a single expert (untrained weights)."""

import argparse
import json

import torch

from moecalo.evaluation import benchmark_inference
from moecalo.experiments import desk_data
from moecalo.training import TrainConfig, build_model


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()
    torch.set_num_threads(1)

    cond, resp, _, ids = desk_data()
    best = {}
    for n_exp in (1, 3):
        model = build_model(cond[ids.train_ids], resp[ids.train_ids], TrainConfig(n_experts=n_exp))
        runs = [benchmark_inference(model, args.n, conditions=cond) for _ in range(args.repeats)]
        best[n_exp] = min(runs, key=lambda r: r["seconds"])
        print(json.dumps(best[n_exp]))
    print(f"ratio 3/1 experts: {best[3]['seconds'] / best[1]['seconds']:.3f}")


if __name__ == "__main__":
    main()
