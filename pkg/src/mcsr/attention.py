"""Window attention machinery: partitioning, shifted-window masks,
self/cross attention over window tokens, and the two-branch fusion block.

All attention operates on non-overlapping square windows.  Feature maps whose
sides are not window multiples are reflect-padded before partitioning and
cropped back afterwards, so callers never have to pad.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NEG_INF = -1e9

_MASK_CACHE: dict = {}


def reflect_pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    """Reflect-pad the bottom/right of (B, C, H, W) up to the next multiple."""
    h, w = x.shape[-2:]
    x = _pad_axis(x, (multiple - h % multiple) % multiple, axis=-2)
    x = _pad_axis(x, (multiple - w % multiple) % multiple, axis=-1)
    return x


def _pad_axis(x: torch.Tensor, pad: int, axis: int) -> torch.Tensor:
    while pad > 0:
        avail = x.shape[axis] - 1  # reflect padding must stay below the side length
        if avail == 0:
            spec = (0, 0, 0, pad) if axis == -2 else (0, pad, 0, 0)
            return F.pad(x, spec, mode="replicate")
        step = min(pad, avail)
        spec = (0, 0, 0, step) if axis == -2 else (0, step, 0, 0)
        x = F.pad(x, spec, mode="reflect")
        pad -= step
    return x


@dataclass
class PartitionMeta:
    """Bookkeeping needed to invert a window partition (padded dims + crop)."""

    batch: int
    height: int
    width: int
    padded_height: int
    padded_width: int
    window: int


def window_partition(x: torch.Tensor, window: int):
    """Split (B, C, H, W) into (B * nW, window^2, C) token windows.

    Windows are taken in row-major order over the (reflect-padded) grid and
    tokens are row-major within each window.  Returns the windows plus the
    metadata for :func:`window_reverse`.
    """
    b, c, h, w = x.shape
    xp = reflect_pad_to_multiple(x, window)
    hp, wp = xp.shape[-2:]
    t = xp.permute(0, 2, 3, 1)
    t = t.reshape(b, hp // window, window, wp // window, window, c)
    windows = t.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)
    return windows, PartitionMeta(b, h, w, hp, wp, window)


def window_reverse(windows: torch.Tensor, meta: PartitionMeta) -> torch.Tensor:
    """Inverse of :func:`window_partition`, cropped to the original size."""
    b, hp, wp, win = meta.batch, meta.padded_height, meta.padded_width, meta.window
    c = windows.shape[-1]
    t = windows.reshape(b, hp // win, wp // win, win, win, c)
    t = t.permute(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, c)
    return t.permute(0, 3, 1, 2)[:, :, : meta.height, : meta.width]


def shifted_window_mask(
    height: int,
    width: int,
    window: int,
    shift: int,
    device=None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Additive logits mask (nW, n, n) for cyclically shifted windows.

    After rolling the image by -shift, windows near the bottom/right edges mix
    pixels that were not neighbors; pairs whose pre-shift regions differ get
    NEG_INF so their post-softmax weight vanishes.
    """
    if height % window or width % window:
        raise ValueError(f"mask dims {height}x{width} must be window multiples")
    key = (height, width, window, shift, str(device), dtype)
    cached = _MASK_CACHE.get(key)
    if cached is not None:
        return cached
    # Region ids are assigned on the rolled canvas: the last `window` rows/cols
    # hold the wrap seam, split at -shift into pre-seam and wrapped content.
    region = torch.zeros(1, 1, height, width, dtype=dtype, device=device)
    idx = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            region[:, :, hs, ws] = idx
            idx += 1
    tokens, _ = window_partition(region, window)
    ids = tokens.squeeze(-1)
    mask = torch.where(ids.unsqueeze(1) == ids.unsqueeze(2), 0.0, NEG_INF).to(dtype)
    _MASK_CACHE[key] = mask
    return mask


class WindowSelfAttention(nn.Module):
    """Multi-head self-attention over window token sequences."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def attention_probs(self, tokens: torch.Tensor, mask=None) -> torch.Tensor:
        """Softmax attention weights, shape (B, heads, n, n)."""
        b, n, c = tokens.shape
        qkv = self.qkv(tokens).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k = qkv[0], qkv[1]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(b // nw, nw, self.heads, n, n) + mask[:, None]
            attn = attn.reshape(b, self.heads, n, n)
        return attn.softmax(dim=-1)

    def forward(self, tokens: torch.Tensor, mask=None) -> torch.Tensor:
        b, n, c = tokens.shape
        qkv = self.qkv(tokens).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(b // nw, nw, self.heads, n, n) + mask[:, None]
            attn = attn.reshape(b, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class WindowCrossAttention(nn.Module):
    """Multi-head attention with queries from one token stream and
    keys/values from another (possibly narrower) stream."""

    def __init__(self, dim: int, kv_dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.kv_dim = kv_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _check(self, q_tokens, kv_tokens):
        if q_tokens.shape[:2] != kv_tokens.shape[:2]:
            raise ValueError(
                f"query windows {tuple(q_tokens.shape[:2])} and key/value windows "
                f"{tuple(kv_tokens.shape[:2])} must share the same spatial grid"
            )

    def attention_probs(self, q_tokens, kv_tokens, mask=None) -> torch.Tensor:
        self._check(q_tokens, kv_tokens)
        b, n, _ = q_tokens.shape
        q = self.q(q_tokens).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(kv_tokens).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(b // nw, nw, self.heads, n, n) + mask[:, None]
            attn = attn.reshape(b, self.heads, n, n)
        return attn.softmax(dim=-1)

    def forward(self, q_tokens, kv_tokens, mask=None) -> torch.Tensor:
        self._check(q_tokens, kv_tokens)
        b, n, c = q_tokens.shape
        q = self.q(q_tokens).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(kv_tokens).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(kv_tokens).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(b // nw, nw, self.heads, n, n) + mask[:, None]
            attn = attn.reshape(b, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class CrossModalityFusion(nn.Module):
    """Fuses low-resolution features with aligned guidance features.

    Window self-attention refines the query branch, window cross-attention
    injects the guidance content, and an MLP integrates both; each stage sits
    behind a pre-norm residual, and the guidance is layer-normalized once
    before the key/value projections.
    """

    def __init__(self, dim: int, kv_dim: int, window: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.window = window
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = WindowSelfAttention(dim, heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.norm_guidance = nn.LayerNorm(kv_dim)
        self.cross_attn = WindowCrossAttention(dim, kv_dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, feat: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        if feat.shape[-2:] != guidance.shape[-2:]:
            raise ValueError(
                f"feature grid {tuple(feat.shape[-2:])} and guidance grid "
                f"{tuple(guidance.shape[-2:])} must match"
            )
        tokens, meta = window_partition(feat, self.window)
        g_tokens, _ = window_partition(guidance, self.window)
        x = tokens + self.self_attn(self.norm_self(tokens))
        x = x + self.cross_attn(self.norm_cross(x), self.norm_guidance(g_tokens))
        x = x + self.mlp(self.norm_mlp(x))
        return window_reverse(x, meta)
