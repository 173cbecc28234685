"""Photomultiplier channels, Wasserstein-1 metrics, quartile analysis and timing."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from moecalo.dataset import CalorimeterSpec

FORMAT_VERSION = 1
CHANNELS = ("pmtc", "pmt1", "pmt2", "pmt3", "pmt4")


def channel_masks(spec_or_shape) -> np.ndarray:
    """Boolean masks ``(5, H, W)``: parity checkerboard, then four quadrant bundles.

    Pixels with even ``row + col`` feed the common channel.  The remaining pixels
    go to the quadrant bundle they sit in, with the split at ``ceil(H/2)`` and
    ``ceil(W/2)``.
    """
    h, w = spec_or_shape.shape if isinstance(spec_or_shape, CalorimeterSpec) else spec_or_shape
    rows, cols = np.indices((h, w))
    common = (rows + cols) % 2 == 0
    top = rows < -(-h // 2)
    left = cols < -(-w // 2)
    rest = ~common
    return np.stack([
        common,
        rest & top & left,
        rest & top & ~left,
        rest & ~top & left,
        rest & ~top & ~left,
    ])


def channel_split(x) -> np.ndarray:
    """Channel sums for one image ``(H, W) -> (5,)`` or a batch ``(N, H, W) -> (N, 5)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (N, H, W), got shape {x.shape}")
    masks = channel_masks(x.shape[-2:]).astype(np.float64)
    return np.einsum("...hw,chw->...c", x, masks)


def wasserstein1(a, b) -> float:
    """Earth mover's distance between two empirical 1-D distributions."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein1 needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.sort(np.concatenate([a, b]))
    widths = np.diff(grid)
    cdf_a = np.searchsorted(a, grid[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def channel_ws(real_channels: np.ndarray, gen_channels: np.ndarray) -> list[float]:
    return [wasserstein1(real_channels[:, k], gen_channels[:, k]) for k in range(len(CHANNELS))]


def quartile_groups(real_intensity: np.ndarray, n_groups: int = 4) -> list[np.ndarray]:
    """Equal-count groups of sample indices by ascending real intensity."""
    order = np.argsort(real_intensity, kind="stable")
    return np.array_split(order, n_groups)


def histogram_table(real: np.ndarray, gen: np.ndarray, bins: int = 64) -> dict:
    pooled = np.concatenate([real, gen])
    edges = np.histogram_bin_edges(pooled, bins=bins, range=(pooled.min(), pooled.max()))
    return {
        "edges": edges.tolist(),
        "real": np.histogram(real, bins=edges)[0].tolist(),
        "gen": np.histogram(gen, bins=edges)[0].tolist(),
    }


@dataclass
class EvalReport:
    ws_per_channel: list[float]
    ws_mean: float
    ws_quartiles: list[float]
    expert_stats: list[dict]
    timing: float | None
    histograms: dict
    n_samples: int
    real_channels: np.ndarray = field(repr=False, default=None)
    gen_channels: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "ws_per_channel": dict(zip(CHANNELS, self.ws_per_channel)),
            "ws_mean": self.ws_mean,
            "ws_quartiles": self.ws_quartiles,
            "expert_stats": self.expert_stats,
            "seconds_per_10k": self.timing,
            "n_samples": self.n_samples,
            "histograms": self.histograms,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def compare(real, generated, expert_ids=None, n_experts: int | None = None, bins: int = 64,
            timing: float | None = None) -> EvalReport:
    """Metrics between matched real and generated response sets."""
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if real.shape != generated.shape:
        raise ValueError(f"shape mismatch: {real.shape} vs {generated.shape}")
    rc, gc = channel_split(real), channel_split(generated)
    ws = channel_ws(rc, gc)
    quartiles = []
    for idx in quartile_groups(real.sum(axis=(1, 2))):
        quartiles.append(float(np.mean(channel_ws(rc[idx], gc[idx]))) if idx.size else float("nan"))
    stats = []
    if expert_ids is not None:
        gen_intensity = generated.sum(axis=(1, 2))
        n_experts = n_experts or int(np.max(expert_ids)) + 1
        for e in range(n_experts):
            sel = gen_intensity[expert_ids == e]
            stats.append({
                "expert": e,
                "count": int(sel.size),
                "share": float(sel.size / len(gen_intensity)),
                "mean": float(sel.mean()) if sel.size else None,
                "std": float(sel.std()) if sel.size else None,
            })
    hists = {name: histogram_table(rc[:, k], gc[:, k], bins) for k, name in enumerate(CHANNELS)}
    return EvalReport(ws, float(np.mean(ws)), quartiles, stats, timing, hists, len(real), rc, gc)


def evaluate(model, test_conditions, test_responses, seed: int = 0, bins: int = 64,
             spec: CalorimeterSpec | None = None) -> EvalReport:
    """Generate one response per test condition and compare against the real set."""
    if spec is not None and spec != model.spec:
        raise ValueError(f"checkpoint is for {model.spec.name}, evaluation set is {spec.name}")
    if tuple(np.shape(test_responses)[1:]) != model.spec.shape:
        raise ValueError("test responses do not match the checkpoint's detector resolution")
    t0 = time.perf_counter()
    generated, ids = model.generate(test_conditions, seed=seed)
    elapsed = time.perf_counter() - t0
    return compare(test_responses, generated, ids, model.n_experts, bins,
                   timing=elapsed * 10_000 / len(generated))


def benchmark_inference(model, n: int, device_label: str = "cpu", conditions=None, seed: int = 0,
                        batch_size: int = 1024) -> dict:
    """Wall-clock seconds to route and generate ``n`` responses after one warm-up batch."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if conditions is None:
        rng = np.random.default_rng(seed)
        conditions = model.standardizer.mean + model.standardizer.std * rng.standard_normal((n, 9))
    conditions = np.asarray(conditions)
    conditions = conditions[np.arange(n) % len(conditions)]
    model.generate(conditions[: min(n, batch_size)], seed=seed, batch_size=batch_size)

    t0 = time.perf_counter()
    model.generate(conditions, seed=seed, batch_size=batch_size)
    total = time.perf_counter() - t0

    with torch.no_grad():
        c = model.standardizer(conditions)
        t0 = time.perf_counter()
        for start in range(0, n, batch_size):
            model.route(c[start:start + batch_size])
        router_time = time.perf_counter() - t0
    return {
        "format_version": FORMAT_VERSION,
        "device_label": device_label,
        "n": n,
        "n_experts": model.n_experts,
        "seconds": total,
        "router_seconds": router_time,
        "router_share": router_time / total if total > 0 else 0.0,
    }


def export_histograms(report: EvalReport, out_dir, plot: bool = False) -> list[Path]:
    """One CSV per channel with ``bin_lo, bin_hi, real_count, gen_count`` rows."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write histograms to {out_dir}: {exc}") from exc
    paths = []
    for name in CHANNELS:
        h = report.histograms[name]
        path = out_dir / f"hist_{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "real_count", "gen_count"])
            for lo, hi, r, g in zip(h["edges"][:-1], h["edges"][1:], h["real"], h["gen"]):
                writer.writerow([repr(lo), repr(hi), r, g])
        paths.append(path)
    if plot:
        paths.append(_plot_histograms(report, out_dir))
    return paths


def _plot_histograms(report: EvalReport, out_dir: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(CHANNELS), figsize=(4 * len(CHANNELS), 3))
    for ax, name in zip(axes, CHANNELS):
        h = report.histograms[name]
        edges = np.asarray(h["edges"])
        ax.stairs(h["real"], edges, label="real")
        ax.stairs(h["gen"], edges, label="generated")
        ax.set_title(name)
    axes[0].legend()
    fig.tight_layout()
    path = out_dir / "histograms.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
