"""The five learnable components: identity-related encoder, identity-unrelated
encoder (plain or reparameterized), generator, and the domain/class
discriminators, all on top of a shared backbone."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("DC", "KL")
LOGVAR_CLAMP = 8.0


class ConfigError(ValueError):
    """Inconsistent model or layout configuration."""


@dataclass(frozen=True)
class PartLayout:
    """Horizontal strip counts per branch and the per-part feature width.

    Parts are ordered branch-major: each branch contributes its global vector
    followed by its strip vectors (strips only when the branch has more than
    one).
    """

    branches: tuple[int, ...] = (1, 2, 3)
    p: int = 256

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(int(b) for b in self.branches))
        if not self.branches or min(self.branches) < 1 or self.p < 1:
            raise ConfigError(f"bad layout {self.branches} / p={self.p}")

    @property
    def parts_per_branch(self) -> list[int]:
        return [1 + n if n > 1 else 1 for n in self.branches]

    @property
    def K(self) -> int:
        return sum(self.parts_per_branch)

    @property
    def dim(self) -> int:
        return self.K * self.p

    @property
    def granularity(self) -> int:
        return math.lcm(*self.branches)

    def local_units(self) -> list[tuple[int, int, int]]:
        """``(branch, strip, part index)`` for every local (strip) feature."""
        units, k = [], 0
        for b, n in enumerate(self.branches):
            k += 1
            if n > 1:
                for s in range(n):
                    units.append((b, s, k))
                    k += 1
        return units

    def global_parts(self) -> list[int]:
        out, k = [], 0
        for n in self.branches:
            out.append(k)
            k += 1 + n if n > 1 else 1
        return out


@dataclass
class ModelConfig:
    resolution: tuple[int, int] = (64, 32)
    n_classes: int = 20
    layout: PartLayout = field(default_factory=lambda: PartLayout((1, 2, 3), 32))
    variant: str = "DC"
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    backbone_strides: tuple[int, ...] = (2, 2, 2, 1)
    map_height: int | None = 6
    head_channels: int = 64
    noise_dim: int = 128
    gen_base: tuple[int, int] = (2, 1)
    gen_width: int = 256
    gen_dropout: float = 0.5
    gen_dropout_stages: int = 3
    disc_width: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if isinstance(self.layout, dict):
            self.layout = PartLayout(**self.layout)
        self.resolution = tuple(self.resolution)
        self.gen_base = tuple(self.gen_base)


def _upsampling_stages(resolution, base) -> int:
    (h, w), (bh, bw) = resolution, base
    if h % bh or w % bw:
        raise ConfigError(f"resolution {h}x{w} is not a multiple of the base grid {bh}x{bw}")
    rh, rw = h // bh, w // bw
    if rh != rw or rh < 2 or rh & (rh - 1):
        raise ConfigError(
            f"resolution {h}x{w} is not a power-of-two multiple of the base grid {bh}x{bw}"
        )
    return int(round(math.log2(rh)))


def _trunk_depth(resolution) -> int:
    # 5 blocks at full scale; fewer so narrow inputs keep a >= 2 pixel wide map.
    return max(1, min(5, int(math.log2(resolution[1])) - 1))


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """NHWC array in [0, 1] -> NCHW tensor."""
    return torch.as_tensor(np.ascontiguousarray(images), dtype=dtype).permute(0, 3, 1, 2).contiguous()


def to_numpy_images(images: torch.Tensor) -> np.ndarray:
    return images.detach().permute(0, 2, 3, 1).cpu().numpy()


# ---------------------------------------------------------------------------
# Backbone and part heads
# ---------------------------------------------------------------------------


class ToyBackbone(nn.Module):
    """Conv/BN/ReLU blocks with the configured strides, optionally followed by
    adaptive average pooling of the height to ``map_height``."""

    def __init__(self, channels=(16, 32, 64, 64), strides=(2, 2, 2, 1), map_height: int | None = None):
        super().__init__()
        if len(channels) != len(strides):
            raise ConfigError("backbone channels and strides differ in length")
        layers, c_in = [], 3
        for c, s in zip(channels, strides):
            layers += [nn.Conv2d(c_in, c, 3, s, 1, bias=False), nn.BatchNorm2d(c), nn.ReLU(inplace=True)]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.map_height = map_height
        self.out_channels = c_in

    def forward(self, x):
        x = self.body(x)
        if self.map_height is not None:
            x = F.adaptive_avg_pool2d(x, (self.map_height, x.shape[-1]))
        return x


class BranchHead(nn.Module):
    """Two conv layers, max pooling over a region and a bottleneck to p dims.

    The same weights encode the whole map (global vector) and each horizontal
    strip (local vectors); each strip is convolved on its own.
    """

    def __init__(self, in_ch: int, mid_ch: int, p: int, strips: int):
        super().__init__()
        self.strips = strips
        self.convs = nn.Sequential(
            nn.Conv2d(in_ch, mid_ch, 3, 1, 1, bias=False),
            nn.BatchNorm2d(mid_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid_ch, mid_ch, 3, 1, 1, bias=False),
            nn.BatchNorm2d(mid_ch),
            nn.ReLU(inplace=True),
        )
        self.bottleneck = nn.Sequential(nn.Linear(mid_ch, p, bias=False), nn.BatchNorm1d(p))

    def _embed(self, x):
        return self.bottleneck(torch.amax(self.convs(x), dim=(2, 3)))

    def forward(self, fmap):
        b, c, h, w = fmap.shape
        out = [self._embed(fmap)]
        if self.strips > 1:
            n = self.strips
            strips = fmap.reshape(b, c, n, h // n, w).permute(0, 2, 1, 3, 4).reshape(b * n, c, h // n, w)
            out.append(self._embed(strips).reshape(b, n, -1))
            return torch.cat([out[0][:, None], out[1]], dim=1)
        return out[0][:, None]


class PartEncoder(nn.Module):
    """One head per branch; output is [B, K, p] in branch-major order."""

    def __init__(self, in_ch: int, layout: PartLayout, mid_ch: int):
        super().__init__()
        self.layout = layout
        self.heads = nn.ModuleList(BranchHead(in_ch, mid_ch, layout.p, n) for n in layout.branches)

    def forward(self, fmap):
        return torch.cat([head(fmap) for head in self.heads], dim=1)


def check_map(fmap_height: int, layout: PartLayout) -> None:
    bad = [n for n in layout.branches if fmap_height % n]
    if bad:
        raise ConfigError(f"feature map height {fmap_height} is not divisible by strip counts {bad}")


def encode_parts(fmap: torch.Tensor, heads: PartEncoder, layout: PartLayout | None = None) -> torch.Tensor:
    layout = layout or heads.layout
    check_map(fmap.shape[2], layout)
    return heads(fmap)


class UnrelatedEncoder(nn.Module):
    """Part encoder for identity-unrelated features.

    The KL variant adds per-part fully connected layers predicting a mean and
    a log-variance, and reparameterizes a sample from them.
    """

    def __init__(self, in_ch: int, layout: PartLayout, mid_ch: int, variant: str = "DC"):
        super().__init__()
        self.variant = variant
        self.parts = PartEncoder(in_ch, layout, mid_ch)
        if variant == "KL":
            K, p = layout.K, layout.p
            self.fc_weight = nn.Parameter(torch.randn(K, p, 2 * p) / math.sqrt(p))
            self.fc_bias = nn.Parameter(torch.zeros(K, 2 * p))

    def forward(self, fmap, sample: bool | None = None, eps: torch.Tensor | None = None):
        h = self.parts(fmap)
        if self.variant == "DC":
            return h, None
        stats = torch.einsum("bkp,kpq->bkq", h, self.fc_weight) + self.fc_bias
        mu, logvar = stats.chunk(2, dim=-1)
        logvar = logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        if sample is None:
            sample = self.training
        if eps is None:
            eps = torch.randn_like(mu) if sample else torch.zeros_like(mu)
        return mu + torch.exp(0.5 * logvar) * eps, (mu, logvar)


# ---------------------------------------------------------------------------
# Generator and discriminators
# ---------------------------------------------------------------------------


class Generator(nn.Module):
    """Projects [features, noise, one-hot label] onto the base grid and upsamples
    with transposed convolutions (x2 each) to the output resolution."""

    def __init__(self, feat_dim, noise_dim, n_classes, resolution, base=(2, 1), width=256,
                 dropout=0.5, dropout_stages=3):
        super().__init__()
        self.n_stages = _upsampling_stages(resolution, base)
        self.base = tuple(base)
        self.width = width
        self.noise_dim = noise_dim
        self.n_classes = n_classes
        self.project = nn.Sequential(
            nn.Linear(feat_dim + noise_dim + n_classes, width * base[0] * base[1], bias=False),
            nn.BatchNorm1d(width * base[0] * base[1]),
            nn.LeakyReLU(0.2),
        )
        stages, c = [], width
        for s in range(self.n_stages):
            if s == self.n_stages - 1:
                stages += [nn.ConvTranspose2d(c, 3, 4, 2, 1), nn.Tanh()]
                break
            c_out = max(16, c // 2)
            stages += [nn.ConvTranspose2d(c, c_out, 4, 2, 1, bias=False), nn.BatchNorm2d(c_out), nn.LeakyReLU(0.2)]
            if s < dropout_stages and dropout > 0:
                stages.append(nn.Dropout(dropout))
            c = c_out
        self.stages = nn.Sequential(*stages)

    def forward(self, composed, noise, label_onehot):
        z = torch.cat([composed, noise, label_onehot], dim=1)
        x = self.project(z).view(-1, self.width, *self.base)
        return self.stages(x)


def _disc_block(c_in, c_out, stride, kernel=4):
    pad = 1 if kernel in (3, 4) else kernel // 2
    return [nn.Conv2d(c_in, c_out, kernel, stride, pad), nn.InstanceNorm2d(c_out, affine=True), nn.LeakyReLU(0.2)]


class Discriminator(nn.Module):
    """Shared stride-2 trunk with a PatchGAN domain head and a class head."""

    def __init__(self, resolution, n_classes, width=32):
        super().__init__()
        self.n_trunk = _trunk_depth(resolution)
        layers, c = [], 3
        for i in range(self.n_trunk):
            c_out = min(256, width * 2**i)
            layers += _disc_block(c, c_out, 2)
            c = c_out
        self.trunk = nn.Sequential(*layers)
        self.domain_head = nn.Sequential(
            *_disc_block(c, c, 1, 3), *_disc_block(c, c, 1, 3), nn.Conv2d(c, 1, 3, 1, 1)
        )
        h, w = resolution[0] >> self.n_trunk, resolution[1] >> self.n_trunk
        self.trunk_hw = (h, w)
        c_cls = min(256, 2 * c)
        self.class_block = nn.Sequential(*_disc_block(c, c_cls, 2))
        ch, cw = (h + 1) // 2, (w + 1) // 2
        self.class_fc = nn.Linear(c_cls * ch * cw, n_classes)

    def features(self, images01):
        return self.trunk(images01 * 2.0 - 1.0)

    def domain(self, images01):
        """Patch logit map [B, 1, h, w]."""
        return self.domain_head(self.features(images01))

    def classify(self, images01):
        """Class logits [B, C]."""
        return self.class_fc(self.class_block(self.features(images01)).flatten(1))


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------


class Encoded(NamedTuple):
    phi_R: torch.Tensor  # [B, K, p]
    phi_U: torch.Tensor  # [B, K, p]
    kl_params: tuple[torch.Tensor, torch.Tensor] | None
    logits: torch.Tensor  # [B, K, C]


COMPONENTS = ("backbone", "E_R", "classifier", "E_U", "G", "D_D", "D_C")


class ISGAN(nn.Module):
    """All learnable parts. ``backbone`` may be any module mapping NCHW images
    to a feature map and exposing ``out_channels``."""

    def __init__(self, cfg: ModelConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        layout = cfg.layout
        self.layout = layout
        self.backbone = backbone or ToyBackbone(cfg.backbone_channels, cfg.backbone_strides, cfg.map_height)
        with torch.no_grad():
            was = self.backbone.training
            self.backbone.eval()
            probe = self.backbone(torch.zeros(1, 3, *cfg.resolution))
            self.backbone.train(was)
        self.map_shape = tuple(probe.shape[2:])
        check_map(self.map_shape[0], layout)
        in_ch = probe.shape[1]
        self.E_R = PartEncoder(in_ch, layout, cfg.head_channels)
        self.E_U = UnrelatedEncoder(in_ch, layout, cfg.head_channels, cfg.variant)
        self.classifier = nn.Parameter(torch.randn(layout.K, cfg.n_classes, layout.p) * 0.01)
        self.G = Generator(layout.dim, cfg.noise_dim, cfg.n_classes, cfg.resolution, cfg.gen_base,
                           cfg.gen_width, cfg.gen_dropout, cfg.gen_dropout_stages)
        self.D = Discriminator(cfg.resolution, cfg.n_classes, cfg.disc_width)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def component_modules(self, name: str) -> list[nn.Module | nn.Parameter]:
        table = {
            "backbone": [self.backbone],
            "E_R": [self.E_R],
            "classifier": [self.classifier],
            "E_U": [self.E_U],
            "G": [self.G],
            "D_D": [self.D.trunk, self.D.domain_head],
            "D_C": [self.D.trunk, self.D.class_block, self.D.class_fc],
        }
        if name not in table:
            raise KeyError(f"unknown component {name!r}")
        return table[name]

    def component_parameters(self, name: str) -> list[nn.Parameter]:
        out = []
        for m in self.component_modules(name):
            out.extend([m] if isinstance(m, nn.Parameter) else m.parameters())
        return out

    def part_logits(self, phi_R: torch.Tensor) -> torch.Tensor:
        return torch.einsum("bkp,kcp->bkc", phi_R, self.classifier)

    def encode(self, images01: torch.Tensor, sample: bool | None = None, eps=None) -> Encoded:
        fmap = self.backbone(images01)
        phi_R = encode_parts(fmap, self.E_R, self.layout)
        phi_U, kl = self.E_U(fmap, sample=sample, eps=eps)
        return Encoded(phi_R, phi_U, kl, self.part_logits(phi_R))

    def encode_related(self, images01: torch.Tensor) -> torch.Tensor:
        return encode_parts(self.backbone(images01), self.E_R, self.layout)

    def generate(self, composed: torch.Tensor, label_onehot: torch.Tensor | None = None,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
        """Images in [0, 1] from flattened composed features [B, K*p]."""
        b = composed.shape[0]
        if noise is None:
            noise = torch.randn(b, self.cfg.noise_dim, dtype=composed.dtype, device=composed.device)
        if label_onehot is None:
            label_onehot = composed.new_zeros(b, self.cfg.n_classes)
        return (self.G(composed, noise, label_onehot) + 1.0) * 0.5

    def discriminate_domain(self, images01):
        return self.D.domain(images01)

    def discriminate_class(self, images01):
        return self.D.classify(images01)


def one_hot(labels: torch.Tensor, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    return F.one_hot(labels.long(), n_classes).to(dtype)
