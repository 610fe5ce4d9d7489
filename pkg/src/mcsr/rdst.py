"""Densely-connected window-attention blocks and their guided groups.

A dense block chains window-attention layers whose inputs are the channel
concatenation of everything produced so far; each layer contributes a fixed
number of new feature channels, and a 1x1 fusion conv plus a local residual
restores the block width.  A guided group runs cross-modality fusion first,
then a sequence of dense blocks, with a short skip around the sequence.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .attention import (
    CrossModalityFusion,
    Mlp,
    WindowSelfAttention,
    reflect_pad_to_multiple,
    shifted_window_mask,
    window_partition,
    window_reverse,
)


class SwinLayer(nn.Module):
    """Pre-norm window attention + MLP pair with an optional cyclic shift."""

    def __init__(self, dim: int, window: int, heads: int, shift: int, mlp_ratio: float):
        super().__init__()
        if shift < 0 or shift >= window:
            raise ValueError(f"shift must be in [0, window), got {shift}")
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        xp = reflect_pad_to_multiple(x, self.window)
        hp, wp = xp.shape[-2:]
        mask = None
        if self.shift:
            xp = torch.roll(xp, shifts=(-self.shift, -self.shift), dims=(2, 3))
            mask = shifted_window_mask(
                hp, wp, self.window, self.shift, device=xp.device, dtype=xp.dtype
            )
        tokens, meta = window_partition(xp, self.window)
        tokens = tokens + self.attn(self.norm1(tokens), mask)
        tokens = tokens + self.mlp(self.norm2(tokens))
        out = window_reverse(tokens, meta)
        if self.shift:
            out = torch.roll(out, shifts=(self.shift, self.shift), dims=(2, 3))
        return out[:, :, :h, :w]


class DenseSwinLayer(nn.Module):
    """One dense unit: a SwinLayer over the concatenated inputs followed by a
    1x1 conv emitting the layer's growth channels."""

    def __init__(self, in_dim: int, growth: int, window: int, heads: int, shift: int, mlp_ratio: float):
        super().__init__()
        self.body = SwinLayer(in_dim, window, heads, shift, mlp_ratio)
        self.to_growth = nn.Conv2d(in_dim, growth, 1)

    def forward(self, x):
        return self.to_growth(self.body(x))


class DenseSwinBlock(nn.Module):
    """Dense chain of window-attention layers with local feature fusion.

    Layer i consumes dim + i*growth channels (the running concatenation) and
    emits growth channels; shifts alternate 0, window/2, 0, ...  The fusion
    conv maps the full concatenation back to the block width, added to the
    input.
    """

    def __init__(self, dim: int, layers: int, growth: int, window: int, heads: int, mlp_ratio: float):
        super().__init__()
        if layers < 1:
            raise ValueError(f"layers must be >= 1, got {layers}")
        self.shifts = [0 if i % 2 == 0 else window // 2 for i in range(layers)]
        for i in range(layers):
            if (dim + i * growth) % heads:
                raise ValueError(
                    f"dense layer {i} width {dim + i * growth} not divisible by heads {heads}"
                )
        self.layers = nn.ModuleList(
            DenseSwinLayer(dim + i * growth, growth, window, heads, self.shifts[i], mlp_ratio)
            for i in range(layers)
        )
        self.fuse = nn.Conv2d(dim + layers * growth, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=1)))
        return x + self.fuse(torch.cat(feats, dim=1))


class GuidedGroup(nn.Module):
    """Cross-modality fusion followed by dense blocks and a short skip.

    With every residual tail zero-initialized this reduces to doubling its
    input (fused + fused), which is the intended near-identity start.
    """

    def __init__(
        self,
        dim: int,
        kv_dim: int,
        blocks: int,
        layers: int,
        growth: int,
        window: int,
        heads: int,
        mlp_ratio: float,
    ):
        super().__init__()
        if blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {blocks}")
        self.fusion = CrossModalityFusion(dim, kv_dim, window, heads, mlp_ratio)
        self.blocks = nn.ModuleList(
            DenseSwinBlock(dim, layers, growth, window, heads, mlp_ratio) for _ in range(blocks)
        )

    def forward(self, feat: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        if feat.shape[-2:] != guidance.shape[-2:]:
            raise ValueError(
                f"feature grid {tuple(feat.shape[-2:])} and guidance grid "
                f"{tuple(guidance.shape[-2:])} must match"
            )
        fused = self.fusion(feat, guidance)
        x = fused
        for block in self.blocks:
            x = block(x)
        return x + fused
