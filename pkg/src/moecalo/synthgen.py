"""Seedable generator of calorimeter-like responses with three intensity regimes.

Mode 0 is faint and dispersed, mode 1 medium, mode 2 bright and focused.  Each
base draw is emitted twice with independent Poisson noise, so every
conditioning vector belongs to a group of two.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from moecalo.dataset import COND_DIM, CalorimeterSpec

# (mass GeV/c^2, charge) pairs the synthetic particles are drawn from
PARTICLE_SPECIES = ((0.938272, 1.0), (0.939565, 0.0), (1.875613, 1.0))


@dataclass
class SynthConfig:
    spec: CalorimeterSpec = field(default_factory=CalorimeterSpec.desk)
    n_samples: int = 6000
    seed: int = 0
    mode_fractions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    intensity_ranges: tuple[tuple[float, float], ...] = ((50.0, 200.0), (500.0, 1500.0), (3000.0, 8000.0))
    spread_ranges: tuple[tuple[float, float], ...] = ((6.0, 10.0), (3.0, 5.0), (1.0, 2.0))

    def __post_init__(self):
        self.mode_fractions = tuple(float(f) for f in self.mode_fractions)
        self.intensity_ranges = tuple((float(lo), float(hi)) for lo, hi in self.intensity_ranges)
        self.spread_ranges = tuple((float(lo), float(hi)) for lo, hi in self.spread_ranges)
        if self.n_samples <= 0:
            raise ValueError(f"n_samples must be positive, got {self.n_samples}")
        if len(self.mode_fractions) != 3 or len(self.intensity_ranges) != 3 or len(self.spread_ranges) != 3:
            raise ValueError("exactly three modes are required")
        if min(self.mode_fractions) < 0 or abs(sum(self.mode_fractions) - 1.0) > 1e-9:
            raise ValueError(f"mode_fractions must be non-negative and sum to 1: {self.mode_fractions}")
        for lo, hi in self.intensity_ranges + self.spread_ranges:
            # degenerate (lo == hi) ranges pin a value exactly
            if lo > hi or lo < 0:
                raise ValueError(f"invalid range ({lo}, {hi})")
        means = [sum(r) / 2 for r in self.intensity_ranges]
        if not means[0] < means[1] < means[2]:
            raise ValueError("intensity ranges must increase from mode 0 to mode 2")

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "n_samples": self.n_samples,
            "seed": self.seed,
            "mode_fractions": list(self.mode_fractions),
            "intensity_ranges": [list(r) for r in self.intensity_ranges],
            "spread_ranges": [list(r) for r in self.spread_ranges],
        }


def render_blob(shape: tuple[int, int], row: float, col: float, sigma: float, total: float) -> np.ndarray:
    """Isotropic Gaussian sampled at pixel centres, normalised to sum to ``total``."""
    rr = np.arange(shape[0])[:, None] - row
    cc = np.arange(shape[1])[None, :] - col
    blob = np.exp(-(rr**2 + cc**2) / (2.0 * sigma**2))
    return blob * (total / blob.sum())


def blob_centre(spec: CalorimeterSpec, mom_x: float, mom_y: float) -> tuple[float, float]:
    """Transverse momenta in [-1, 1] shift the centre by up to a quarter of the grid."""
    row = (spec.height - 1) / 2.0 + mom_y * spec.height / 4.0
    col = (spec.width - 1) / 2.0 + mom_x * spec.width / 4.0
    return row, col


def _base_draw(cfg: SynthConfig, index: int):
    rng = np.random.default_rng([cfg.seed, index, 0])
    mode = int(rng.choice(3, p=cfg.mode_fractions))
    energy = rng.uniform(*cfg.intensity_ranges[mode])
    sigma = rng.uniform(*cfg.spread_ranges[mode])
    mass, charge = PARTICLE_SPECIES[rng.integers(len(PARTICLE_SPECIES))]
    mom_x, mom_y = rng.uniform(-1.0, 1.0, size=2)
    mom_z = np.sqrt(max(energy**2 - mass**2, 0.0))
    pos_x, pos_y = rng.normal(0.0, 0.5, size=2)
    pos_z = rng.uniform(-1.0, 1.0)
    cond = np.array([energy, mass, charge, pos_x, pos_y, pos_z, mom_x, mom_y, mom_z])
    return mode, sigma, cond


def synthesize_with_modes(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Like :func:`synthesize` but also returns the per-sample mode label."""
    n = cfg.n_samples
    conditions = np.empty((n, COND_DIM), dtype=np.float32)
    responses = np.empty((n, *cfg.spec.shape), dtype=np.float32)
    modes = np.empty(n, dtype=np.int64)
    for i in range(n):
        base, copy = divmod(i, 2)
        mode, sigma, cond = _base_draw(cfg, base)
        row, col = blob_centre(cfg.spec, cond[6], cond[7])
        mean = render_blob(cfg.spec.shape, row, col, sigma, cond[0])
        noise_rng = np.random.default_rng([cfg.seed, base, copy + 1])
        responses[i] = np.maximum(noise_rng.poisson(mean), 0)
        conditions[i] = cond
        modes[i] = mode
    return conditions, responses, modes


def synthesize(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    conditions, responses, _ = synthesize_with_modes(cfg)
    return conditions, responses
