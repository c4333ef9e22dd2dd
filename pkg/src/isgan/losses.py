"""Training objectives and the moving statistics behind the decorrelation term.

Image-space terms take images in [0, 1] as NCHW tensors and average over the
batch; each pairwise term is keyed by ``(i, j)`` with ``i, j`` in ``"ap"``:
``recon[(i, j)]`` is the generation from identity-related features of image
``j`` plus identity-unrelated features of image ``i`` (target: image ``i``),
and ``shuffled[(i, j)]`` (``i != j``) the generation from part-shuffled
identity-related features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

PAIR_KEYS = (("a", "a"), ("a", "p"), ("p", "a"), ("p", "p"))
CROSS_KEYS = (("a", "p"), ("p", "a"))
COMPONENT_NAMES = ("R", "U", "S", "PS", "D", "C")
STD_FLOOR = 1e-5


def softmax_prob(logits, c: int) -> torch.Tensor:
    logits = torch.as_tensor(logits, dtype=torch.float64)
    z = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return (e / e.sum(dim=-1, keepdim=True))[..., c]


def smoothed_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    """Per-row cross-entropy with targets (1 - eps) on the label and eps/(C-1) elsewhere."""
    C = logits.shape[-1]
    labels = torch.as_tensor(labels, device=logits.device).long()
    if labels.numel() and (int(labels.max()) >= C or int(labels.min()) < 0):
        raise ValueError(f"label out of range for {C} classes")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    if smoothing == 0.0:
        return nll
    other = -(logp.sum(dim=-1)) - nll
    return (1.0 - smoothing) * nll + smoothing / (C - 1) * other


def identity_loss(part_logits: torch.Tensor, labels, smoothing: float = 0.0) -> torch.Tensor:
    """Cross-entropy summed over the K parts, averaged over the batch.

    ``part_logits`` is [B, K, C] (or [K, C] for one image).
    """
    if part_logits.dim() == 2:
        part_logits = part_logits[None]
    labels = torch.as_tensor(labels, device=part_logits.device).reshape(-1)
    B, K, _ = part_logits.shape
    ce = smoothed_cross_entropy(part_logits, labels[:, None].expand(B, K), smoothing)
    return ce.sum(dim=1).mean()


def _l1(target: torch.Tensor, output: torch.Tensor) -> torch.Tensor:
    return (target - output).abs().flatten(1).mean(dim=1).mean()


def shuffle_recon_loss(images: Mapping[str, torch.Tensor], recon: Mapping[tuple, torch.Tensor]) -> torch.Tensor:
    """Mean absolute error of the four same/swapped reconstructions, summed."""
    return sum(_l1(images[i], recon[(i, j)]) for i, j in PAIR_KEYS)


def part_shuffle_loss(images: Mapping[str, torch.Tensor], shuffled: Mapping[tuple, torch.Tensor]) -> torch.Tensor:
    return sum(_l1(images[i], shuffled[(i, j)]) for i, j in CROSS_KEYS)


def kl_unrelated_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL to the standard normal, summed over parts and dims, batch-averaged.

    Inputs are [B, K, p]; lower-rank inputs are treated as a single sample.
    """
    kl = 0.5 * (mu**2 + torch.exp(logvar) - logvar - 1.0)
    if kl.dim() < 3:
        return kl.sum()
    return kl.flatten(1).sum(dim=1).mean()


class MovingStats:
    """Exponential moving per-dimension mean and std for named feature streams.

    Each stream holds [K, p] tensors. The first update copies the batch
    statistics; later ones blend with weight ``momentum`` on the new batch.
    """

    def __init__(self, momentum: float = 0.1, floor: float = STD_FLOOR):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.momentum = momentum
        self.floor = floor
        self.mean: dict[str, torch.Tensor] = {}
        self.std: dict[str, torch.Tensor] = {}

    def initialized(self, stream: str) -> bool:
        return stream in self.mean

    def update(self, stream: str, batch: torch.Tensor) -> None:
        batch = batch.detach()
        mean = batch.mean(dim=0)
        std = batch.std(dim=0, unbiased=True) if batch.shape[0] > 1 else torch.zeros_like(mean)
        if stream not in self.mean:
            self.mean[stream] = mean.clone()
            self.std[stream] = std.clamp_min(self.floor)
            return
        m = self.momentum
        self.mean[stream] = (1 - m) * self.mean[stream] + m * mean
        self.std[stream] = ((1 - m) * self.std[stream] + m * std).clamp_min(self.floor)

    def standardize(self, stream: str, x: torch.Tensor) -> torch.Tensor:
        if stream not in self.mean:
            raise RuntimeError(f"moving statistics for {stream!r} are not initialized")
        return (x - self.mean[stream]) / self.std[stream]

    def state_dict(self) -> dict:
        return {"momentum": self.momentum, "floor": self.floor,
                "mean": {k: v.clone() for k, v in self.mean.items()},
                "std": {k: v.clone() for k, v in self.std.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.momentum = state["momentum"]
        self.floor = state["floor"]
        self.mean = {k: v.clone() for k, v in state["mean"].items()}
        self.std = {k: v.clone() for k, v in state["std"].items()}


def part_correlations(phi_R: torch.Tensor, phi_U: torch.Tensor, stats: MovingStats) -> torch.Tensor:
    """Per-part correlation estimate [K]: mean over batch and dims of the
    product of moving-standardized features."""
    zr = stats.standardize("R", phi_R)
    zu = stats.standardize("U", phi_U)
    return (zr * zu).mean(dim=(0, 2))


def decorrelation_loss(phi_R: torch.Tensor, phi_U: torch.Tensor, stats: MovingStats,
                       absolute: bool = True) -> torch.Tensor:
    """Sum over parts of |rho_k| (or rho_k with ``absolute=False``)."""
    rho = part_correlations(phi_R, phi_U, stats)
    return rho.abs().sum() if absolute else rho.sum()


def update_moving_stats(stats: MovingStats, phi_R: torch.Tensor, phi_U: torch.Tensor) -> MovingStats:
    stats.update("R", phi_R)
    stats.update("U", phi_U)
    return stats


def decorrelation_step(phi_R, phi_U, stats: MovingStats, absolute: bool = True) -> torch.Tensor:
    """Loss against the statistics of previous batches, then fold this batch in.

    The very first batch only initializes the statistics and contributes 0.
    """
    if not (stats.initialized("R") and stats.initialized("U")):
        update_moving_stats(stats, phi_R, phi_U)
        return phi_R.sum() * 0.0
    loss = decorrelation_loss(phi_R, phi_U, stats, absolute)
    update_moving_stats(stats, phi_R, phi_U)
    return loss


def _log_mean_prob(patch_logits: torch.Tensor, positive: bool) -> torch.Tensor:
    """log of the patch-averaged sigmoid (or of one minus it), per image."""
    flat = patch_logits.flatten(1)
    ls = F.logsigmoid(flat if positive else -flat)
    return torch.logsumexp(ls, dim=1) - math.log(flat.shape[1])


def _check_counts(reals, recon, shuffled):
    if len(reals) != 2 or len(recon) != 4 or len(shuffled) != 2:
        raise ValueError(
            f"expected 2 real, 4 reconstructed and 2 part-shuffled terms, got "
            f"{len(reals)}/{len(recon)}/{len(shuffled)}"
        )


def domain_loss(real_maps: Sequence[torch.Tensor], recon_maps: Sequence[torch.Tensor],
                shuffled_maps: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Adversarial terms from patch logit maps.

    Returns ``(objective, generator_loss)``: the log-likelihood objective the
    domain discriminator maximizes (always <= 0), and the non-saturating
    generator loss ``-sum log D(fake)``.
    """
    _check_counts(real_maps, recon_maps, shuffled_maps)
    fakes = list(recon_maps) + list(shuffled_maps)
    objective = sum(_log_mean_prob(m, True).mean() for m in real_maps)
    objective = objective + sum(_log_mean_prob(m, False).mean() for m in fakes)
    gen = -sum(_log_mean_prob(m, True).mean() for m in fakes)
    return objective, gen


def class_loss(real_logits: Sequence[torch.Tensor], recon_logits: Sequence[torch.Tensor],
               shuffled_logits: Sequence[torch.Tensor], labels, smoothing: float = 0.0) -> torch.Tensor:
    """Sum of the eight cross-entropies against the shared identity label."""
    _check_counts(real_logits, recon_logits, shuffled_logits)
    terms = list(real_logits) + list(recon_logits) + list(shuffled_logits)
    return sum(smoothed_cross_entropy(t, labels, smoothing).mean() for t in terms)


@dataclass
class LossWeights:
    R: float = 20.0
    U: float = 1.0
    S: float = 10.0
    PS: float = 10.0
    D: float = 1.0
    C: float = 2.0
    # stage -> lambda_U override (the KL variant ramps it up in stage 3)
    U_schedule: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        self.U_schedule = {int(k): float(v) for k, v in self.U_schedule.items()}
        for name in COMPONENT_NAMES:
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")
        for v in self.U_schedule.values():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"lambda_U schedule value must be finite and >= 0, got {v}")

    @classmethod
    def defaults(cls, variant: str = "DC") -> "LossWeights":
        if variant == "KL":
            return cls(U=1e-3, U_schedule={2: 1e-3, 3: 1e-2})
        return cls()

    def at(self, name: str, stage: int) -> float:
        if name == "U" and stage in self.U_schedule:
            return self.U_schedule[stage]
        return getattr(self, name)


STAGE_COMPONENTS = {1: ("R",), 2: ("U", "S", "PS", "D", "C"), 3: COMPONENT_NAMES}


def total_loss(components: Mapping[str, torch.Tensor | float], weights: LossWeights,
               stage: int) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the stage's active components and its per-component breakdown."""
    if stage not in STAGE_COMPONENTS:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    total = torch.zeros((), dtype=torch.float64)
    breakdown = {}
    for name in STAGE_COMPONENTS[stage]:
        if name not in components:
            continue
        term = weights.at(name, stage) * components[name]
        breakdown[name] = float(term.detach()) if torch.is_tensor(term) else float(term)
        total = total + term
    return total, breakdown
