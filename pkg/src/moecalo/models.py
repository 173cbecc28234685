"""Generator, discriminator, auxiliary regressor and router networks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from moecalo.dataset import COND_DIM, CalorimeterSpec


@dataclass
class ModelConfig:
    latent_dim: int = 10
    cond_dim: int = COND_DIM
    gen_channels: int = 64
    disc_channels: int = 32
    aux_channels: int = 20
    router_hidden: int = 64
    # None picks 2 upsampling stages for grids up to 16 px, 3 otherwise
    n_upsample: int | None = None

    def upsample_stages(self, spec: CalorimeterSpec) -> int:
        if self.n_upsample is not None:
            return self.n_upsample
        return 2 if max(spec.shape) <= 16 else 3

    def to_dict(self) -> dict:
        return asdict(self)


class Generator(nn.Module):
    """``(z, c) -> [-1, 1]^{H x W}`` via a dense seed map and transposed convolutions."""

    def __init__(self, spec: CalorimeterSpec, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.spec = spec
        self.latent_dim = cfg.latent_dim
        self.cond_dim = cfg.cond_dim
        stages = cfg.upsample_stages(spec)
        factor = 2**stages
        self.seed_shape = (math.ceil(spec.height / factor), math.ceil(spec.width / factor))
        ch = cfg.gen_channels
        self.project = nn.Sequential(
            nn.Linear(cfg.latent_dim + cfg.cond_dim, ch * self.seed_shape[0] * self.seed_shape[1]),
            nn.LeakyReLU(0.2),
        )
        self.seed_channels = ch
        blocks = []
        for _ in range(stages):
            out = max(ch // 2, 8)
            blocks += [
                nn.ConvTranspose2d(ch, out, kernel_size=4, stride=2, padding=1),
                nn.GroupNorm(min(4, out), out),
                nn.LeakyReLU(0.2),
            ]
            ch = out
        blocks += [nn.Conv2d(ch, 1, kernel_size=3, padding=1), nn.Tanh()]
        self.body = nn.Sequential(*blocks)

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent code must have length {self.latent_dim}, got {z.shape[-1]}")
        if c.shape[-1] != self.cond_dim:
            raise ValueError(f"conditions must have length {self.cond_dim}, got {c.shape[-1]}")
        h = self.project(torch.cat([z, c], dim=-1))
        h = h.view(-1, self.seed_channels, *self.seed_shape)
        out = self.body(h)
        # crop, never resample
        return out[:, 0, : self.spec.height, : self.spec.width]


def _strided_trunk(in_ch: int, widths: list[int]) -> nn.Sequential:
    layers = []
    for w in widths:
        layers += [nn.Conv2d(in_ch, w, kernel_size=3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        in_ch = w
    return nn.Sequential(*layers)


def _flat_size(trunk: nn.Module, in_ch: int, spec: CalorimeterSpec) -> int:
    with torch.no_grad():
        return trunk(torch.zeros(1, in_ch, *spec.shape)).numel()


class Discriminator(nn.Module):
    """``(x, c) -> (0, 1)``; conditions are broadcast as extra input planes."""

    def __init__(self, spec: CalorimeterSpec, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.spec = spec
        ch = cfg.disc_channels
        self.trunk = _strided_trunk(1 + cfg.cond_dim, [ch, 2 * ch])
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(_flat_size(self.trunk, 1 + cfg.cond_dim, spec), 1), nn.Sigmoid()
        )

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        x = x.unsqueeze(1) if x.dim() == 3 else x
        planes = c[:, :, None, None].expand(-1, -1, *x.shape[-2:])
        return self.head(self.trunk(torch.cat([x, planes], dim=1))).squeeze(1)


class AuxRegressor(nn.Module):
    """Predicts the (row, col) pixel coordinates of the brightest pixel."""

    def __init__(self, spec: CalorimeterSpec, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.spec = spec
        ch = cfg.aux_channels
        self.trunk = nn.Sequential(
            nn.Conv2d(1, ch, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * ch, 2 * ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(_flat_size(self.trunk, 1, spec), 2))
        # start predictions at the grid centre
        with torch.no_grad():
            self.head[1].bias.copy_(torch.tensor([(spec.height - 1) / 2, (spec.width - 1) / 2]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.spec.shape:
            raise ValueError(f"expected grid {self.spec.shape}, got {tuple(x.shape[-2:])}")
        x = x.unsqueeze(1) if x.dim() == 3 else x
        return self.head(self.trunk(x))


class Router(nn.Module):
    """Two hidden layers and a softmax head over experts."""

    def __init__(self, n_experts: int = 3, cfg: ModelConfig | None = None, zero_init_head: bool = False):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.n_experts = n_experts
        h = cfg.router_hidden
        self.net = nn.Sequential(
            nn.Linear(cfg.cond_dim, h), nn.Tanh(),
            nn.Linear(h, h), nn.Tanh(),
            nn.Linear(h, n_experts),
        )
        if zero_init_head:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def logits(self, c: torch.Tensor) -> torch.Tensor:
        return self.net(c)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(c), dim=-1)


@dataclass
class GateDecision:
    probs: torch.Tensor
    expert_id: torch.Tensor


def hard_assignment(probs: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index
    return torch.argmax(probs, dim=-1)


def route(router: Router, c: torch.Tensor) -> GateDecision:
    single = c.dim() == 1
    probs = router(c.unsqueeze(0) if single else c)
    ids = hard_assignment(probs)
    if single:
        return GateDecision(probs[0], ids[0])
    return GateDecision(probs, ids)


def generate(generator: Generator, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    single = z.dim() == 1
    if single:
        z, c = z.unsqueeze(0), c.unsqueeze(0)
    out = generator(z, c)
    return out[0] if single else out


def regress_peak(aux: AuxRegressor, x: torch.Tensor) -> torch.Tensor:
    single = x.dim() == 2
    out = aux(x.unsqueeze(0) if single else x)
    return out[0] if single else out


class Expert(nn.Module):
    def __init__(self, spec: CalorimeterSpec, cfg: ModelConfig | None = None):
        super().__init__()
        self.generator = Generator(spec, cfg)
        self.discriminator = Discriminator(spec, cfg)
        self.aux = AuxRegressor(spec, cfg)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
