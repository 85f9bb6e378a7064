"""Time-conditioned convolutional denoiser.

A small 3-level encoder-decoder with skip connections, group normalization,
SiLU activations, and a sinusoidal timestep embedding. The embedding is defined
over all integers, so the reserved steps t=0 (feed-forward depth) and t=-1
(trajectory extension) ride the same conditioning pathway as the diffusion
steps t=1..T.

Initialization is done with a seeded numpy generator rather than torch's RNG so
checkpoints are reproducible bit-for-bit regardless of torch's global state.
The final output convolution is zero-initialized: a fresh model maps every
input to the zero latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class ArchDescriptor:
    in_channels: int = 3
    widths: tuple = (32, 64, 128)
    time_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if len(self.widths) < 2:
            raise ValueError("need at least 2 levels")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError("time_dim must be a positive even integer")

    @property
    def levels(self) -> int:
        return len(self.widths)


def sinusoidal_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard sin/cos positional embedding, valid for any integer t."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    angles = float(t) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    return emb.to(dtype)


def _num_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_num_groups(channels), channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        self.norm2 = nn.GroupNorm(_num_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class Denoiser(nn.Module):
    """eps_hat(z, t): same-shape output, deterministic, no dropout."""

    def __init__(self, arch: ArchDescriptor):
        super().__init__()
        self.arch = arch
        w = arch.widths
        td = arch.time_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.stem = nn.Conv2d(arch.in_channels, w[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList([ResBlock(c, td) for c in w])
        self.downs = nn.ModuleList(
            [nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(len(w) - 1)]
        )
        self.mid = ResBlock(w[-1], td)
        self.up_convs = nn.ModuleList(
            [nn.Conv2d(w[i + 1], w[i], 3, padding=1) for i in range(len(w) - 2, -1, -1)]
        )
        self.fuse_convs = nn.ModuleList(
            [nn.Conv2d(2 * w[i], w[i], 3, padding=1) for i in range(len(w) - 2, -1, -1)]
        )
        self.dec_blocks = nn.ModuleList(
            [ResBlock(w[i], td) for i in range(len(w) - 2, -1, -1)]
        )
        self.head_norm = nn.GroupNorm(_num_groups(w[0]), w[0])
        self.head = nn.Conv2d(w[0], arch.in_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: int) -> torch.Tensor:
        if not isinstance(t, (int, np.integer)):
            raise TypeError(f"t must be an integer, got {type(t).__name__}")
        if t < -1:
            raise ValueError(f"t must be >= -1, got {t}")
        squeeze = z.dim() == 3
        if squeeze:
            z = z[None]
        if z.dim() != 4 or z.shape[1] != self.arch.in_channels:
            raise ValueError(
                f"input shape {tuple(z.shape)} incompatible with "
                f"{self.arch.in_channels} input channels"
            )
        p = next(self.parameters())
        emb = sinusoidal_embedding(int(t), self.arch.time_dim, dtype=p.dtype)
        emb = self.time_mlp(emb[None].to(p.device)).expand(z.shape[0], -1)

        h = self.stem(z)
        skips = []
        for i, block in enumerate(self.enc_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid(h, emb)
        for j, (up, fuse, block) in enumerate(zip(self.up_convs, self.fuse_convs, self.dec_blocks)):
            h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = up(h)
            h = fuse(torch.cat([h, skips[-2 - j]], dim=1))
            h = block(h, emb)
        out = self.head(torch.nn.functional.silu(self.head_norm(h)))
        return out[0] if squeeze else out


def init_params(arch: ArchDescriptor, seed: int) -> Denoiser:
    """Fan-in-scaled random init from a seeded numpy stream; zero head."""
    model = Denoiser(arch)
    rng = np.random.default_rng((int(seed), 0x0DE17))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in ("head.weight", "head.bias"):
                p.zero_()
                continue
            if name.endswith("bias"):
                p.zero_()
                continue
            if "norm" in name:
                p.fill_(1.0)
                continue
            shape = tuple(p.shape)
            if p.dim() == 4:            # conv weight
                fan_in = shape[1] * shape[2] * shape[3]
                std = math.sqrt(2.0 / fan_in)
            elif p.dim() == 2:          # linear weight
                fan_in = shape[1]
                std = 1.0 / math.sqrt(fan_in)
            else:
                raise AssertionError(f"unexpected parameter rank for {name}")
            vals = rng.standard_normal(shape, dtype=np.float64) * std
            p.copy_(torch.from_numpy(vals).to(p.dtype))
    return model


def forward(params: Denoiser, z: torch.Tensor, t: int) -> torch.Tensor:
    """Functional alias for the module call."""
    return params(z, t)


def parameter_count(arch: ArchDescriptor) -> int:
    """Parameter count derived purely from the descriptor (shape arithmetic)."""

    def conv(cin, cout, k=3):
        return cout * cin * k * k + cout

    def linear(fin, fout):
        return fout * fin + fout

    def norm(c):
        return 2 * c

    def resblock(c, td):
        return 2 * norm(c) + 2 * conv(c, c) + linear(td, c)

    w, td, cin = arch.widths, arch.time_dim, arch.in_channels
    total = linear(td, td) * 2                      # time MLP
    total += conv(cin, w[0])                        # stem
    total += sum(resblock(c, td) for c in w)        # encoder blocks
    total += sum(conv(w[i], w[i + 1]) for i in range(len(w) - 1))   # downs
    total += resblock(w[-1], td)                    # mid
    for i in range(len(w) - 2, -1, -1):
        total += conv(w[i + 1], w[i])               # up conv
        total += conv(2 * w[i], w[i])               # fuse conv
        total += resblock(w[i], td)                 # dec block
    total += norm(w[0]) + conv(w[0], cin)           # head
    return total
