"""Expert and router loss terms.

All functions take tensors and return 0-d tensors so they can be used both in
training graphs and in float64 oracle tests.  Images passed to
:func:`intensity` and :func:`intensity_loss` must be in count space.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

SCORE_CLAMP = 1e-7
DIVERSITY_CAP = 50.0


@dataclass
class HyperParams:
    # expert weights calibrated so each weighted term starts within 10x of the
    # adversarial loss on the desk-scale synthetic data (see init_terms in reports)
    lambda_div: float = 0.1
    lambda_in: float = 0.0005
    lambda_aux: float = 0.25
    lambda_util: float = 0.01
    lambda_diff: float = 0.0001
    epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("lambda_div", "lambda_in", "lambda_aux", "lambda_util", "lambda_diff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def adversarial_losses(d_real, d_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating GAN losses ``(loss_D, loss_G)`` from sigmoid scores."""
    d_real, d_fake = _as_tensor(d_real), _as_tensor(d_fake)
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("empty score batch")
    d_real = d_real.clamp(SCORE_CLAMP, 1 - SCORE_CLAMP)
    d_fake = d_fake.clamp(SCORE_CLAMP, 1 - SCORE_CLAMP)
    loss_d = -(torch.log(d_real).mean() + torch.log1p(-d_fake).mean())
    loss_g = -torch.log(d_fake).mean()
    return loss_d, loss_g


def generator_adversarial_per_sample(d_fake) -> torch.Tensor:
    return -torch.log(_as_tensor(d_fake).clamp(SCORE_CLAMP, 1 - SCORE_CLAMP)).reshape(-1)


def intensity(x) -> torch.Tensor:
    """Pixel sum over the last two axes."""
    x = _as_tensor(x)
    return x.sum(dim=(-2, -1))


def intensity_loss(x_real, x_gen) -> torch.Tensor:
    x_real, x_gen = _as_tensor(x_real), _as_tensor(x_gen)
    if x_real.shape != x_gen.shape:
        raise ValueError(f"shape mismatch: {tuple(x_real.shape)} vs {tuple(x_gen.shape)}")
    return (intensity(x_real) - intensity(x_gen)).abs().mean()


def intensity_loss_from_totals(target_totals, x_gen) -> torch.Tensor:
    """Same as :func:`intensity_loss` with the real pixel sums precomputed."""
    target_totals = _as_tensor(target_totals).to(x_gen.dtype)
    return (target_totals.reshape(-1) - intensity(x_gen).reshape(-1)).abs().mean()


def diversity_loss(scale, x1, x2, z1, z2, cap: float = DIVERSITY_CAP) -> torch.Tensor:
    """Scaled inverse ratio of image distance to latent distance.

    Inputs may be single samples (``x: (H, W)``, ``z: (k,)``) or batches
    (``x: (B, ..., H, W)``, ``z: (B, k)``, ``scale: (B,)``).  The ratio
    ``d_z / d_I`` is capped at ``cap`` per sample before scaling; the result is
    the batch mean.
    """
    x1, x2, z1, z2 = map(_as_tensor, (x1, x2, z1, z2))
    scale = _as_tensor(scale).to(x1.dtype)
    if z1.dim() == 1:
        x1, x2, z1, z2 = x1.unsqueeze(0), x2.unsqueeze(0), z1.unsqueeze(0), z2.unsqueeze(0)
    batch = z1.shape[0]
    d_z = (z1 - z2).abs().reshape(batch, -1).mean(dim=1)
    if torch.any(d_z == 0):
        raise ValueError("latent codes must differ (d_z = 0)")
    d_img = (x1 - x2).abs().reshape(batch, -1).mean(dim=1)
    # d_z / max(d_I, d_z / cap) == min(d_z / d_I, cap) without a 0/0 at d_I = 0
    ratio = d_z / torch.maximum(d_img, d_z / cap)
    return (scale.reshape(-1) * ratio).mean()


def aux_loss(pred, target) -> torch.Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    pred = pred.reshape(-1, 2)
    target = target.reshape(-1, 2).to(pred.dtype)
    if pred.shape[0] != target.shape[0]:
        raise ValueError(f"batch mismatch: {pred.shape[0]} vs {target.shape[0]}")
    return ((pred - target) ** 2).sum(dim=1).mean()


def expert_objective(parts: dict, hp: HyperParams):
    return (
        parts["loss_G"]
        + hp.lambda_div * parts["loss_div"]
        + hp.lambda_in * parts["loss_in"]
        + hp.lambda_aux * parts["loss_aux"]
    )


def utilization_loss(p_bar, eps: float = 1e-8) -> torch.Tensor:
    """Negative entropy of the batch-mean gate distribution.

    Minimising this spreads load across experts.
    """
    p_bar = _as_tensor(p_bar)
    total = float(p_bar.detach().sum())
    if abs(total - 1.0) > 1e-4 or bool((p_bar.detach() < -1e-4).any()):
        raise ValueError(f"p_bar is not on the simplex (sum={total:.6f})")
    return (p_bar * torch.log(p_bar + eps)).sum()


def weighted_mean_intensities(probs, intensities, eps: float = 1e-8) -> torch.Tensor:
    """Gate-weighted mean intensity per expert.

    ``probs`` and ``intensities`` are ``(B, N)``; entry ``[b, i]`` of
    ``intensities`` is the pixel sum of expert ``i``'s output for sample ``b``.
    """
    probs, intensities = _as_tensor(probs), _as_tensor(intensities)
    return (probs * intensities).sum(dim=0) / (probs.sum(dim=0) + eps)


def differentiation_loss(mean_intensities) -> torch.Tensor:
    m = _as_tensor(mean_intensities).reshape(-1)
    if m.numel() < 2:
        raise ValueError("differentiation loss needs at least two experts")
    gaps = m.unsqueeze(0) - m.unsqueeze(1)
    # full matrix counts every unordered pair twice
    return -0.5 * (gaps**2).sum()


def router_objective(expert_losses, util, diff, hp: HyperParams):
    return _as_tensor(expert_losses).sum() + hp.lambda_util * util + hp.lambda_diff * diff
