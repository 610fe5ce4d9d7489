"""High-resolution auxiliary feature branch.

A shallow conv + residual-block stack extracts features from the 6-channel
albedo/normal input at full resolution; each stage's features are deshuffled
(space-to-depth) down to the low-resolution grid and projected to the
guidance width consumed by the cross-attention fusion blocks.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def deshuffle(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Space-to-depth: move each factor x factor block into channels.

    Output channel c*f^2 + (dy*f + dx) at (y, x) equals input channel c at
    (y*f + dy, x*f + dx).  Pure rearrangement; inverse of :func:`pixel_shuffle`.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"dims {h}x{w} not divisible by deshuffle factor {factor}")
    return F.pixel_unshuffle(x, factor)


def pixel_shuffle(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Depth-to-space; exact inverse of :func:`deshuffle`."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    if x.shape[-3] % (factor * factor):
        raise ValueError(
            f"channels {x.shape[-3]} not divisible by factor^2 = {factor * factor}"
        )
    return F.pixel_shuffle(x, factor)


class ResidualBlock(nn.Module):
    """Two 3x3 convs with a ReLU between, added back to the input."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class AuxiliaryBranch(nn.Module):
    """Produces one guidance map per fusion stage, on the low-resolution grid.

    Stage 0 uses the head conv's features directly; each later stage refines
    them with one residual block.  Every stage deshuffles by the upsampling
    scale and applies a learned 1x1 projection down to ``guidance_channels``
    so the guidance width is independent of the scale.
    """

    def __init__(
        self,
        in_channels: int = 6,
        channels: int = 32,
        stages: int = 3,
        scale: int = 4,
        guidance_channels: int = 64,
    ):
        super().__init__()
        if stages < 1:
            raise ValueError(f"stages must be >= 1, got {stages}")
        self.scale = scale
        self.stages = stages
        self.head = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.blocks = nn.ModuleList(ResidualBlock(channels) for _ in range(stages - 1))
        self.projections = nn.ModuleList(
            nn.Conv2d(channels * scale * scale, guidance_channels, 1) for _ in range(stages)
        )

    def forward(self, aux: torch.Tensor) -> list:
        h, w = aux.shape[-2:]
        if h % self.scale or w % self.scale:
            raise ValueError(f"aux dims {h}x{w} not divisible by scale {self.scale}")
        feats = self.head(aux)
        guidance = [self.projections[0](deshuffle(feats, self.scale))]
        for block, proj in zip(self.blocks, self.projections[1:]):
            feats = block(feats)
            guidance.append(proj(deshuffle(feats, self.scale)))
        return guidance
