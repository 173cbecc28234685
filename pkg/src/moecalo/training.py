"""Mixture-of-experts GAN training: routing, expert updates, router updates, checkpoints.

Each batch is routed with hard top-1 decisions.  Every expert then performs one
discriminator update and one generator (+ auxiliary regressor) update on its
sub-batch.  Finally the router is stepped on soft, gate-weighted quantities
computed with all expert parameters held fixed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from moecalo import losses as L
from moecalo.dataset import (
    COND_DIM,
    CalorimeterSpec,
    PreprocessTables,
    ValueTransform,
    build_preprocess_tables,
)
from moecalo.models import Expert, ModelConfig, Router, hard_assignment

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
REPORT_FIELDS = (
    "epoch", "loss_g", "loss_d", "loss_div", "loss_in", "loss_aux",
    "l_util", "l_diff", "util_per_expert", "mean_intensity_per_expert",
)


@dataclass
class TrainConfig:
    spec: CalorimeterSpec = field(default_factory=CalorimeterSpec.desk)
    n_experts: int = 3
    hp: L.HyperParams = field(default_factory=L.HyperParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 128
    epochs: int = 20
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    lr_aux: float = 1e-4
    lr_router: float = 1e-3
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    freeze_router: bool = False
    # how the summed expert losses reach the router: "assigned" weights each
    # sample's generator loss by its assigned gate; "detached" adds it as a constant
    router_expert_loss: str = "detached"

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        for name in ("lr_generator", "lr_discriminator", "lr_aux", "lr_router"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        self.betas = tuple(self.betas)
        if self.router_expert_loss not in ("assigned", "detached"):
            raise ValueError(f"unknown router_expert_loss {self.router_expert_loss!r}")

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "n_experts": self.n_experts,
            "hp": self.hp.to_dict(),
            "model": self.model.to_dict(),
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "lr_generator": self.lr_generator,
            "lr_discriminator": self.lr_discriminator,
            "lr_aux": self.lr_aux,
            "lr_router": self.lr_router,
            "betas": list(self.betas),
            "seed": self.seed,
            "freeze_router": self.freeze_router,
            "router_expert_loss": self.router_expert_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "spec" in d and isinstance(d["spec"], dict):
            s = d["spec"]
            d["spec"] = CalorimeterSpec.from_name(s["name"], s.get("height"), s.get("width"))
        if "hp" in d and isinstance(d["hp"], dict):
            d["hp"] = L.HyperParams(**d["hp"])
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)


def sub_seed(seed: int, stream: str) -> int:
    """Deterministic per-stream seed derived from the root seed."""
    return zlib.crc32(f"{seed}:{stream}".encode()) & 0x7FFFFFFF


# energy and momenta span orders of magnitude; compress before standardising
LOG_FIELDS = (0, 6, 7, 8)


def compress(conditions) -> np.ndarray:
    c = np.array(conditions, dtype=np.float64, copy=True)
    cols = list(LOG_FIELDS)
    c[:, cols] = np.sign(c[:, cols]) * np.log1p(np.abs(c[:, cols]))
    return c


class Standardizer:
    """Signed ``log1p`` on energy and momenta, then per-field z-scoring."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, conditions) -> "Standardizer":
        c = compress(np.atleast_2d(conditions))
        std = c.std(axis=0)
        return cls(c.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, conditions) -> torch.Tensor:
        c = (compress(np.atleast_2d(conditions)) - self.mean) / self.std
        return torch.as_tensor(c, dtype=torch.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


class MixtureOfExperts(nn.Module):
    """All trainable networks plus the fixed input/output normalisers."""

    def __init__(self, cfg: TrainConfig, standardizer: Standardizer, transform: ValueTransform,
                 intensity_unit: float = 1.0):
        super().__init__()
        self.cfg = cfg
        self.spec = cfg.spec
        self.standardizer = standardizer
        self.transform = transform
        # mean training intensity; the differentiation loss works in these units
        self.intensity_unit = float(intensity_unit)
        with torch.random.fork_rng():
            torch.manual_seed(sub_seed(cfg.seed, "init"))
            self.experts = nn.ModuleList(Expert(cfg.spec, cfg.model) for _ in range(cfg.n_experts))
            self.router = Router(cfg.n_experts, cfg.model)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def latent_dim(self) -> int:
        return self.cfg.model.latent_dim

    def route(self, c_std: torch.Tensor):
        probs = self.router(c_std)
        return probs, hard_assignment(probs)

    @torch.no_grad()
    def generate(self, conditions, seed: int = 0, batch_size: int = 1024):
        """Route, sample and decode to count space.

        Returns ``(responses, expert_ids)`` as numpy arrays.
        """
        self.eval()
        c_all = self.standardizer(conditions)
        gen = torch.Generator().manual_seed(seed)
        z_all = torch.randn(len(c_all), self.latent_dim, generator=gen)
        out = np.empty((len(c_all), *self.spec.shape), dtype=np.float32)
        ids_out = np.empty(len(c_all), dtype=np.int64)
        for start in range(0, len(c_all), batch_size):
            c = c_all[start:start + batch_size]
            z = z_all[start:start + batch_size]
            _, ids = self.route(c)
            y = torch.empty(len(c), *self.spec.shape)
            for e in range(self.n_experts):
                mask = ids == e
                if mask.any():
                    y[mask] = self.experts[e].generator(z[mask], c[mask])
            out[start:start + batch_size] = self.transform.inverse_torch(y).numpy()
            ids_out[start:start + batch_size] = ids.numpy()
        return out, ids_out

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "standardizer": self.standardizer.to_dict(),
            "transform": self.transform.to_dict(),
            "intensity_unit": self.intensity_unit,
            "state_dict": self.state_dict(),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "MixtureOfExperts":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format {payload.get('format_version')}")
        cfg = TrainConfig.from_dict(payload["config"])
        std = Standardizer(payload["standardizer"]["mean"], payload["standardizer"]["std"])
        model = cls(cfg, std, ValueTransform(payload["transform"]["max_value"]), payload["intensity_unit"])
        model.load_state_dict(payload["state_dict"])
        return model


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Batch:
    c: torch.Tensor            # standardised conditions (B, 9)
    x: torch.Tensor            # transformed responses (B, H, W)
    scale: torch.Tensor        # diversity scale (B,)
    intensity: torch.Tensor    # real pixel sums (B,)
    peaks: torch.Tensor        # (B, 2) row, col

    def __len__(self) -> int:
        return self.c.shape[0]

    def select(self, mask: torch.Tensor) -> "Batch":
        return Batch(self.c[mask], self.x[mask], self.scale[mask], self.intensity[mask], self.peaks[mask])


def make_batch(model: MixtureOfExperts, conditions, responses, tables: PreprocessTables) -> Batch:
    return Batch(
        c=model.standardizer(conditions),
        x=torch.as_tensor(model.transform.forward(responses), dtype=torch.float32),
        scale=torch.as_tensor(tables.diversity_scale, dtype=torch.float32),
        intensity=torch.as_tensor(tables.intensity, dtype=torch.float32),
        peaks=torch.as_tensor(np.stack([tables.peak_row, tables.peak_col], axis=1), dtype=torch.float32),
    )


class TrainState:
    def __init__(self, model: MixtureOfExperts):
        cfg = model.cfg
        self.model = model
        self.cfg = cfg
        self.opt_g = [torch.optim.Adam(e.generator.parameters(), lr=cfg.lr_generator, betas=cfg.betas) for e in model.experts]
        self.opt_d = [torch.optim.Adam(e.discriminator.parameters(), lr=cfg.lr_discriminator, betas=cfg.betas) for e in model.experts]
        self.opt_a = [torch.optim.Adam(e.aux.parameters(), lr=cfg.lr_aux, betas=cfg.betas) for e in model.experts]
        self.opt_r = torch.optim.Adam(model.router.parameters(), lr=cfg.lr_router, betas=cfg.betas)
        self.noise = torch.Generator().manual_seed(sub_seed(cfg.seed, "noise"))
        self.data_rng = np.random.default_rng(sub_seed(cfg.seed, "data"))
        self.epoch = 0
        self.counts = np.zeros(cfg.n_experts, dtype=np.int64)
        self.history: list[dict] = []


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise FloatingPointError(f"non-finite value in loss term {name!r}")


def _expert_step(state: TrainState, e: int, sub: Batch) -> dict:
    """One discriminator update then one generator + auxiliary update."""
    model, hp = state.model, state.cfg.hp
    expert = model.experts[e]
    G, D, A = expert.generator, expert.discriminator, expert.aux
    n, k = len(sub), model.latent_dim

    z1 = torch.randn(n, k, generator=state.noise)
    fake = G(z1, sub.c)
    loss_d, _ = L.adversarial_losses(D(sub.x, sub.c), D(fake.detach(), sub.c))
    _check_finite("loss_d", loss_d)
    state.opt_d[e].zero_grad()
    loss_d.backward()
    state.opt_d[e].step()

    z2 = torch.randn(n, k, generator=state.noise)
    fake2 = G(z2, sub.c)
    per_sample_g = L.generator_adversarial_per_sample(D(fake, sub.c))
    parts = {
        "loss_G": per_sample_g.mean(),
        "loss_div": L.diversity_loss(sub.scale, fake, fake2, z1, z2),
        "loss_in": L.intensity_loss_from_totals(sub.intensity, model.transform.inverse_torch(fake)),
        "loss_aux": L.aux_loss(A(fake), sub.peaks),
    }
    for name, value in parts.items():
        _check_finite(name, value)
    objective = L.expert_objective(parts, hp)
    state.opt_g[e].zero_grad()
    objective.backward()
    state.opt_g[e].step()

    aux_real = L.aux_loss(A(sub.x), sub.peaks)
    _check_finite("aux_real", aux_real)
    state.opt_a[e].zero_grad()
    aux_real.backward()
    state.opt_a[e].step()

    out = {name: float(v.detach()) for name, v in parts.items()}
    out["loss_D"] = float(loss_d.detach())
    out["objective"] = float(objective.detach())
    out["per_sample_g"] = per_sample_g.detach()
    return out


def _router_step(state: TrainState, batch: Batch, ids: torch.Tensor, per_sample_g: torch.Tensor) -> dict:
    model, hp = state.model, state.cfg.hp
    n_exp = model.n_experts
    probs = model.router(batch.c)
    z = torch.randn(len(batch), model.latent_dim, generator=state.noise)
    with torch.no_grad():
        f = torch.stack(
            [L.intensity(model.transform.inverse_torch(ex.generator(z, batch.c))) for ex in model.experts],
            dim=1,
        )
    util = L.utilization_loss(probs.mean(dim=0), hp.epsilon)
    mean_f = L.weighted_mean_intensities(probs, f / model.intensity_unit, hp.epsilon)
    diff = L.differentiation_loss(mean_f) if n_exp >= 2 else torch.zeros(())
    onehot = torch.nn.functional.one_hot(ids, n_exp).to(probs.dtype)
    if state.cfg.router_expert_loss == "assigned":
        weight = probs.gather(1, ids[:, None]).squeeze(1)
    else:
        weight = torch.ones(len(batch))
    expert_losses = ((weight * per_sample_g)[:, None] * onehot).sum(dim=0) / len(batch)
    _check_finite("l_util", util)
    _check_finite("l_diff", diff)
    objective = L.router_objective(expert_losses, util, diff, hp)
    _check_finite("router_objective", objective)
    if not state.cfg.freeze_router and n_exp > 1:
        state.opt_r.zero_grad()
        objective.backward()
        state.opt_r.step()
    hard_means = [
        float(f[ids == e, e].mean()) if bool((ids == e).any()) else float("nan") for e in range(n_exp)
    ]
    return {
        "l_util": float(util.detach()),
        "l_diff": float(diff.detach()),
        "router_objective": float(objective.detach()),
        "gate_mean": probs.detach().mean(dim=0).tolist(),
        "hard_mean_intensity": hard_means,
    }


def train_step(state: TrainState, batch: Batch) -> dict:
    """Route one batch, update every expert with data, then update the router."""
    if len(batch) < 2:
        raise ValueError("batch size must be >= 2")
    model = state.model
    model.train()
    with torch.no_grad():
        _, ids = model.route(batch.c)

    n_exp = model.n_experts
    counts = torch.bincount(ids, minlength=n_exp)
    per_sample_g = torch.zeros(len(batch))
    expert_metrics: list[dict | None] = []
    for e in range(n_exp):
        mask = ids == e
        if not bool(mask.any()):
            expert_metrics.append(None)
            continue
        m = _expert_step(state, e, batch.select(mask))
        per_sample_g[mask] = m.pop("per_sample_g")
        expert_metrics.append(m)

    router_metrics = _router_step(state, batch, ids, per_sample_g)
    state.counts += counts.numpy()

    def weighted(key):
        num = sum(m[key] * int(counts[e]) for e, m in enumerate(expert_metrics) if m is not None)
        return num / len(batch)

    return {
        "loss_g": weighted("loss_G"),
        "loss_d": weighted("loss_D"),
        "loss_div": weighted("loss_div"),
        "loss_in": weighted("loss_in"),
        "loss_aux": weighted("loss_aux"),
        "counts": counts.tolist(),
        "experts": expert_metrics,
        **router_metrics,
    }


def _probe_writable(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"0" * 4096)
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc


def initial_term_magnitudes(model: MixtureOfExperts, batch: Batch) -> dict:
    """Loss-term magnitudes (weighted) for expert 0 at initialisation."""
    hp = model.cfg.hp
    ex = model.experts[0]
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        z1 = torch.randn(len(batch), model.latent_dim, generator=gen)
        z2 = torch.randn(len(batch), model.latent_dim, generator=gen)
        fake, fake2 = ex.generator(z1, batch.c), ex.generator(z2, batch.c)
        return {
            "loss_G": float(L.generator_adversarial_per_sample(ex.discriminator(fake, batch.c)).mean()),
            "div": hp.lambda_div * float(L.diversity_loss(batch.scale, fake, fake2, z1, z2)),
            "in": hp.lambda_in * float(L.intensity_loss_from_totals(batch.intensity, model.transform.inverse_torch(fake))),
            "aux": hp.lambda_aux * float(L.aux_loss(ex.aux(fake), batch.peaks)),
        }


@dataclass
class TrainingReport:
    history: list[dict]
    init_terms: dict
    counts_total: list[int]

    @property
    def final(self) -> dict:
        return self.history[-1]


def build_model(conditions, responses, cfg: TrainConfig) -> MixtureOfExperts:
    unit = float(np.asarray(responses, dtype=np.float64).sum(axis=(1, 2)).mean())
    return MixtureOfExperts(
        cfg, Standardizer.fit(conditions), ValueTransform.fit(responses), unit if unit > 0 else 1.0
    )


def train(
    conditions,
    responses,
    cfg: TrainConfig,
    out_dir=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[MixtureOfExperts, TrainingReport]:
    """Train on the given (training-split) arrays.

    With ``out_dir`` set, ``checkpoint.pt`` is rewritten after every epoch and
    one JSON line per epoch is appended to ``report.jsonl``.
    """
    if out_dir is not None:
        out_dir = Path(out_dir)
        _probe_writable(out_dir)
        (out_dir / "report.jsonl").write_text("")
    conditions = np.asarray(conditions)
    responses = np.asarray(responses)
    if conditions.shape[1] != COND_DIM or responses.shape[1:] != cfg.spec.shape:
        raise ValueError("dataset does not match the configured detector spec")

    tables = build_preprocess_tables(conditions, responses)
    model = build_model(conditions, responses, cfg)
    state = TrainState(model)
    full = make_batch(model, conditions, responses, tables)
    init_terms = initial_term_magnitudes(model, full.select(torch.arange(min(len(full), cfg.batch_size))))
    logger.info("initial weighted loss terms: %s", init_terms)

    n = len(full)
    for epoch in range(cfg.epochs):
        order = torch.as_tensor(state.data_rng.permutation(n))
        sums: dict[str, float] = {}
        epoch_counts = np.zeros(cfg.n_experts, dtype=np.int64)
        intensity_sum = np.zeros(cfg.n_experts)
        intensity_n = np.zeros(cfg.n_experts)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            m = train_step(state, full.select(idx))
            steps += 1
            for key in ("loss_g", "loss_d", "loss_div", "loss_in", "loss_aux", "l_util", "l_diff"):
                sums[key] = sums.get(key, 0.0) + m[key]
            c = np.asarray(m["counts"])
            epoch_counts += c
            for e, v in enumerate(m["hard_mean_intensity"]):
                if c[e] > 0:
                    intensity_sum[e] += v * c[e]
                    intensity_n[e] += c[e]
        state.epoch = epoch + 1
        record = {key: sums[key] / steps for key in sums}
        record["epoch"] = state.epoch
        record["util_per_expert"] = (epoch_counts / epoch_counts.sum()).tolist()
        record["mean_intensity_per_expert"] = [
            float(s / k) if k else None for s, k in zip(intensity_sum, intensity_n)
        ]
        record = {key: record[key] for key in REPORT_FIELDS}
        state.history.append(record)
        logger.info("epoch %d: %s", state.epoch, record)
        if out_dir is not None:
            model.save(out_dir / "checkpoint.pt")
            with open(out_dir / "report.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if on_epoch is not None:
            on_epoch(record)

    return model, TrainingReport(state.history, init_terms, state.counts.tolist())


def generate_responses(model: MixtureOfExperts, conditions, seed: int = 0, spec: CalorimeterSpec | None = None):
    if spec is not None and spec != model.spec:
        raise ValueError(f"checkpoint is for {model.spec.name}, requested {spec.name}")
    return model.generate(conditions, seed=seed)
