"""Desk-scale experiment runner shared by the acceptance suite and ``scripts/``.

One call trains a mixture on the 3-mode synthetic set, evaluates it on the
held-out split and summarises routing against the known generating modes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from moecalo.dataset import split
from moecalo.evaluation import EvalReport, evaluate
from moecalo.losses import HyperParams
from moecalo.synthgen import SynthConfig, synthesize_with_modes
from moecalo.training import MixtureOfExperts, TrainConfig, train

DESK_SAMPLES = 6000
DATA_SEED = 0
EVAL_SEED = 1


@lru_cache(maxsize=2)
def desk_data(n_samples: int = DESK_SAMPLES, seed: int = DATA_SEED):
    """``(conditions, responses, modes, SplitIndex)`` for the 16x16 synthetic set."""
    cond, resp, modes = synthesize_with_modes(SynthConfig(n_samples=n_samples, seed=seed))
    return cond, resp, modes, split(len(cond), 0.8, seed)


def mode_purity(expert_ids: np.ndarray, modes: np.ndarray, n_experts: int) -> tuple[float, list[int | None]]:
    """Share of samples whose expert's majority mode matches their own mode."""
    hits = 0
    majority: list[int | None] = []
    for e in range(n_experts):
        sel = modes[expert_ids == e]
        if sel.size == 0:
            majority.append(None)
            continue
        counts = np.bincount(sel, minlength=int(modes.max()) + 1)
        majority.append(int(counts.argmax()))
        hits += int(counts.max())
    return hits / len(modes), majority


def min_gap(means) -> float:
    """Smallest gap between sorted per-expert means; 0 when an expert is unused."""
    if any(m is None for m in means):
        return 0.0
    means = sorted(means)
    return float(np.min(np.diff(means))) if len(means) > 1 else float("nan")


@dataclass
class DeskRun:
    n_experts: int
    lambda_util: float
    lambda_diff: float
    seed: int
    epochs: int
    util: list[float]
    gen_means: list[float | None]
    ws_mean: float
    purity: float
    majority_mode: list[int | None]
    seconds: float
    model: MixtureOfExperts = field(repr=False)
    report: EvalReport = field(repr=False)

    @property
    def min_util(self) -> float:
        return min(self.util)

    @property
    def min_gap(self) -> float:
        return min_gap(self.gen_means)

    @property
    def ordering_recovered(self) -> bool:
        """Experts sorted by generated intensity map one-to-one onto modes 0, 1, 2, ..."""
        if any(m is None for m in self.gen_means):
            return False
        order = np.argsort(self.gen_means)
        return [self.majority_mode[e] for e in order] == list(range(self.n_experts))

    def summary(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "lambda_util": self.lambda_util,
            "lambda_diff": self.lambda_diff,
            "seed": self.seed,
            "epochs": self.epochs,
            "util": self.util,
            "gen_means": self.gen_means,
            "ws_mean": self.ws_mean,
            "purity": self.purity,
            "min_gap": self.min_gap,
            "seconds": self.seconds,
        }


def run_desk(n_experts: int = 3, lambda_util: float = 0.01, lambda_diff: float = 1e-4, seed: int = 0,
             epochs: int = 20, **train_kw) -> DeskRun:
    cond, resp, modes, ids = desk_data()
    hp = HyperParams(lambda_util=lambda_util, lambda_diff=lambda_diff)
    cfg = TrainConfig(n_experts=n_experts, hp=hp, epochs=epochs, seed=seed, **train_kw)
    t0 = time.perf_counter()
    model, report = train(cond[ids.train_ids], resp[ids.train_ids], cfg)
    seconds = time.perf_counter() - t0
    ev = evaluate(model, cond[ids.test_ids], resp[ids.test_ids], seed=EVAL_SEED)
    _, gen_ids = model.generate(cond[ids.test_ids], seed=EVAL_SEED)
    purity, majority = mode_purity(gen_ids, modes[ids.test_ids], n_experts)
    return DeskRun(
        n_experts=n_experts,
        lambda_util=lambda_util,
        lambda_diff=lambda_diff,
        seed=seed,
        epochs=epochs,
        util=list(report.final["util_per_expert"]),
        gen_means=[s["mean"] for s in ev.expert_stats],
        ws_mean=ev.ws_mean,
        purity=purity,
        majority_mode=majority,
        seconds=seconds,
        model=model,
        report=ev,
    )
