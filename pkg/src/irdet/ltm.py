"""Motion-aware feature trunk.

A shared-weight per-frame encoder feeds two branches: a long-term branch that
gates the keyframe with a sigmoid fusion of all neighbor frames, and a
short-term branch that enhances the last three frames in a channel-DCT
frequency space with grouped self-attention and cross-attention. Channel and
spatial attention fuse the two branches into the motion feature map consumed
by the detection head. This trunk is the only learned component used at
inference time.
"""
from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn


def dct_matrix(n: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Orthonormal DCT-II basis: row k is cos(pi*k*(2i+1)/(2N)) with scaling."""
    i = torch.arange(n, dtype=torch.float64)
    k = i[:, None]
    basis = torch.cos(math.pi * k * (2.0 * i[None, :] + 1.0) / (2.0 * n))
    basis[0] *= math.sqrt(1.0 / n)
    basis[1:] *= math.sqrt(2.0 / n)
    return basis.to(dtype)


def dct_1d(signal: torch.Tensor) -> torch.Tensor:
    """Orthonormal DCT-II along the last dimension."""
    n = signal.shape[-1]
    basis = dct_matrix(n, dtype=signal.dtype).to(signal.device)
    return signal @ basis.T


def idct_1d(coeffs: torch.Tensor) -> torch.Tensor:
    """Exact inverse of :func:`dct_1d` (orthonormal basis transpose)."""
    n = coeffs.shape[-1]
    basis = dct_matrix(n, dtype=coeffs.dtype).to(coeffs.device)
    return coeffs @ basis


def dct_feature(features: torch.Tensor) -> torch.Tensor:
    """Apply the channel-wise DCT at every spatial location of (..., C, H, W)."""
    moved = features.movedim(-3, -1)  # (..., H, W, C)
    return dct_1d(moved).movedim(-1, -3)


def idct_feature(coeffs: torch.Tensor) -> torch.Tensor:
    moved = coeffs.movedim(-3, -1)
    return idct_1d(moved).movedim(-1, -3)


def _norm(channels: int) -> nn.Module:
    # single-group GroupNorm == layer normalization over (C, H, W)
    return nn.GroupNorm(1, channels)


class ResidualBlock(nn.Module):
    """3x3 conv body with layer normalization and a projected skip path."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            _norm(out_channels),
            nn.SiLU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
        )
        self.skip = (nn.Identity() if in_channels == out_channels
                     else nn.Conv2d(in_channels, out_channels, 1))
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and m.bias is not None:
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.skip(x) + self.body(x)


class Backbone(nn.Module):
    """Shared-weight per-frame encoder; four conv stages down to stride 8."""

    def __init__(self, channels: int = 64):
        super().__init__()
        widths = [max(channels // 8, 4), max(channels // 4, 8), max(channels // 2, 16), channels]
        strides = [1, 2, 2, 2]
        layers: List[nn.Module] = []
        prev = 1
        for width, stride in zip(widths, strides):
            layers += [nn.Conv2d(prev, width, 3, stride=stride, padding=1, bias=False),
                       nn.GroupNorm(min(8, width), width),
                       nn.SiLU()]
            prev = width
        self.stages = nn.Sequential(*layers)
        self.out_channels = channels
        self.stride = 8

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W) grayscale clip -> (B, T, C, H/8, W/8) feature stack."""
        b, t, h, w = frames.shape
        flat = frames.reshape(b * t, 1, h, w)
        feats = self.stages(flat)
        return feats.reshape(b, t, self.out_channels, feats.shape[-2], feats.shape[-1])


class LongTermMotion(nn.Module):
    """Gated fusion of all neighbor frames into the keyframe feature."""

    def __init__(self, channels: int, window: int):
        super().__init__()
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.channels = channels
        if window > 1:
            self.gate = ResidualBlock((window - 1) * channels, channels)
            self.fuse = ResidualBlock(2 * channels, channels)

    def compute_gate(self, features: torch.Tensor) -> torch.Tensor:
        """Sigmoid gate from the concatenated neighbor features (B, T-1, C, H, W)."""
        b = features.shape[0]
        stacked = features.reshape(b, -1, *features.shape[-2:])
        return torch.sigmoid(self.gate(stacked))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, T, C, H, W) -> long-term motion feature (B, C, H, W)."""
        if features.shape[1] != self.window:
            raise ValueError(f"expected T={self.window}, got {features.shape[1]}")
        key = features[:, -1]
        if self.window == 1:
            return key
        gate = self.compute_gate(features[:, :-1])
        return self.fuse(torch.cat([gate * key, key], dim=1))


class FreqEnhance(nn.Module):
    """Joint enhancement of a DCT-space frame pair by grouped self-attention.

    Channels split into low/high DCT-index halves; each half attends over the
    concatenated spatial tokens of both frames, passes a linear layer with a
    residual connection, and the halves are re-joined by a residual projection.
    Returns the enhanced map of the later frame.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.channels = channels
        self.low = (channels + 1) // 2
        high = channels - self.low
        for group, width in (("low", self.low), ("high", high)):
            if width % heads != 0:
                raise ValueError(f"{group}-frequency group width {width} "
                                 f"not divisible by heads={heads}")
        self.attn_low = nn.MultiheadAttention(self.low, heads, batch_first=True)
        self.attn_high = nn.MultiheadAttention(high, heads, batch_first=True)
        self.mlp_low = nn.Linear(self.low, self.low)
        self.mlp_high = nn.Linear(high, high)
        self.join = ResidualBlock(channels, channels)

    def _enhance_group(self, attn: nn.MultiheadAttention, mlp: nn.Linear,
                       fa: torch.Tensor, fb: torch.Tensor,
                       need_weights: bool) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        b, c, h, w = fa.shape
        tokens = torch.cat([fa.flatten(2), fb.flatten(2)], dim=2).transpose(1, 2)  # (B, 2HW, c)
        attended, weights = attn(tokens, tokens, tokens, need_weights=need_weights)
        tokens = tokens + mlp(attended)
        later = tokens[:, h * w:].transpose(1, 2).reshape(b, c, h, w)
        return later, weights

    def forward(self, fa: torch.Tensor, fb: torch.Tensor,
                return_attn: bool = False):
        if fa.shape != fb.shape:
            raise ValueError("frame pair must share one shape")
        low_a, high_a = fa[:, :self.low], fa[:, self.low:]
        low_b, high_b = fb[:, :self.low], fb[:, self.low:]
        out_low, w_low = self._enhance_group(self.attn_low, self.mlp_low,
                                             low_a, low_b, return_attn)
        out_high, w_high = self._enhance_group(self.attn_high, self.mlp_high,
                                               high_a, high_b, return_attn)
        out = self.join(torch.cat([out_low, out_high], dim=1))
        if return_attn:
            return out, (w_low, w_high)
        return out


class ShortTermMotion(nn.Module):
    """Cross-attention between the two most recent frequency-enhanced pairs."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.enhance = FreqEnhance(channels, heads=heads)
        self.proj_early = nn.Conv2d(channels, channels, 1)
        self.proj_late = nn.Conv2d(channels, channels, 1)
        self.cross = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.out = nn.Conv2d(channels, channels, 1)
        for m in (self.proj_early, self.proj_late, self.out):
            nn.init.zeros_(m.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Last three frame features (B, 3, C, H, W) -> short-term map (B, C, H, W)."""
        if features.shape[1] != 3:
            raise ValueError("short-term branch consumes exactly 3 frames")
        d2, d1, d0 = (dct_feature(features[:, i]) for i in range(3))
        pair_early = self.enhance(d2, d1)
        pair_late = self.enhance(d1, d0)
        early = self.proj_early(pair_early)
        late = self.proj_late(pair_late)
        b, c, h, w = late.shape
        q = late.flatten(2).transpose(1, 2)
        kv = early.flatten(2).transpose(1, 2)
        attended, _ = self.cross(q, kv, kv, need_weights=False)
        tokens = q + attended
        return self.out(tokens.transpose(1, 2).reshape(b, c, h, w))


class FuseMotion(nn.Module):
    """Channel- then spatial-attention fusion of the long and short branches.

    Both gate layers start at zero so each gate opens at 0.5 and the initial
    output is a quarter of the projection.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.mix = nn.Conv2d(2 * channels, channels, 3, padding=1)
        hidden = max(channels // reduction, 4)
        self.channel_gate = nn.Sequential(
            nn.Linear(channels, hidden), nn.SiLU(), nn.Linear(hidden, channels))
        self.spatial_gate = nn.Conv2d(2, 1, 7, padding=3)
        nn.init.zeros_(self.mix.bias)
        nn.init.zeros_(self.channel_gate[-1].weight)
        nn.init.zeros_(self.channel_gate[-1].bias)
        nn.init.zeros_(self.spatial_gate.weight)
        nn.init.zeros_(self.spatial_gate.bias)

    def channel_attention(self, mixed: torch.Tensor) -> torch.Tensor:
        pooled = mixed.mean(dim=(-2, -1))
        return torch.sigmoid(self.channel_gate(pooled))[..., None, None]

    def spatial_attention(self, gated: torch.Tensor) -> torch.Tensor:
        stats = torch.cat([gated.mean(dim=1, keepdim=True),
                           gated.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial_gate(stats))

    def forward(self, long_term: torch.Tensor, short_term: torch.Tensor) -> torch.Tensor:
        if long_term.shape != short_term.shape:
            raise ValueError("branch features must share one shape")
        mixed = self.mix(torch.cat([long_term, short_term], dim=1))
        gated = self.channel_attention(mixed) * mixed
        return self.spatial_attention(gated) * gated


class MotionNet(nn.Module):
    """Backbone plus both motion branches; produces the fused motion feature."""

    def __init__(self, channels: int = 64, window: int = 5, heads: int = 4):
        super().__init__()
        if window < 3:
            raise ValueError("motion trunk needs a window of at least 3 frames")
        self.backbone = Backbone(channels)
        self.long_term = LongTermMotion(channels, window)
        self.short_term = ShortTermMotion(channels, heads=heads)
        self.fuse = FuseMotion(channels)
        self.window = window
        self.channels = channels

    def forward(self, frames: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(B, T, H, W) clip -> (motion map (B, C, H', W'), keyframe feature)."""
        feats = self.backbone(frames)
        f_long = self.long_term(feats)
        f_short = self.short_term(feats[:, -3:])
        return self.fuse(f_long, f_short), feats[:, -1]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
