"""Feature composition and region-wise (part-level) shuffling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import PartLayout

MODES = ("short_term", "long_term")


@dataclass(frozen=True)
class ShuffleMask:
    """Swap decisions over the shuffleable local units.

    ``registry`` lists the part indices that may be swapped; ``bits`` has the
    same length, or shape [B, len(registry)] for one mask per pair.
    """

    bits: np.ndarray
    registry: tuple[int, ...]

    def complement(self) -> "ShuffleMask":
        return ShuffleMask(~self.bits, self.registry)


def shuffle_registry(layout: PartLayout, mode: str = "short_term") -> tuple[int, ...]:
    """Local part indices eligible for swapping.

    Long-term mode drops the lowest strip of every multi-strip branch.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    units = layout.local_units()
    if mode == "long_term":
        units = [(b, s, k) for b, s, k in units if s != layout.branches[b] - 1]
    return tuple(k for _, _, k in units)


def _check_layout(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"part layouts differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def compose(phi_R: torch.Tensor, phi_U: torch.Tensor) -> torch.Tensor:
    """Element-wise sum per part, flattened branch-major: [..., K, p] -> [..., K*p]."""
    _check_layout(phi_R, phi_U)
    return (phi_R + phi_U).flatten(-2)


def part_shuffle(phi_i: torch.Tensor, phi_j: torch.Tensor, mask: ShuffleMask) -> torch.Tensor:
    """Take registry units selected by the mask from ``phi_j``, everything else from ``phi_i``.

    Inputs are [K, p] or [B, K, p]; a batched mask needs batched inputs.
    """
    _check_layout(phi_i, phi_j)
    K = phi_i.shape[-2]
    bits = np.asarray(mask.bits, dtype=bool)
    if bits.shape[-1] != len(mask.registry):
        raise ValueError("mask bits do not match the registry")
    if mask.registry and max(mask.registry) >= K:
        raise ValueError("mask registry exceeds the number of parts")
    take = np.zeros(bits.shape[:-1] + (K,), dtype=bool)
    take[..., list(mask.registry)] = bits
    sel = torch.as_tensor(take, device=phi_i.device)[..., None]
    if sel.dim() < phi_i.dim():
        sel = sel.expand(phi_i.shape[:-2] + sel.shape[-2:])
    return torch.where(sel, phi_j, phi_i)


def sample_mask(rng: np.random.Generator, layout: PartLayout, mode: str = "short_term",
                batch: int | None = None) -> ShuffleMask:
    """Independent fair coin per registry unit, redrawn while no unit is selected."""
    registry = shuffle_registry(layout, mode)
    n = len(registry)
    shape = (n,) if batch is None else (batch, n)
    bits = rng.random(shape) < 0.5
    if n:
        rows = bits.reshape(-1, n)
        for r in range(rows.shape[0]):
            while not rows[r].any():
                rows[r] = rng.random(n) < 0.5
        bits = rows.reshape(shape)
    return ShuffleMask(bits, registry)
