"""Illumination-guided texture restoration blocks.

Reflectance features provide attention queries; illumination features provide
keys and values. Attention is computed independently inside non-overlapping
``K x K`` regions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "IGTR_VARIANTS",
    "IGTRConfig",
    "default_region_sizes",
    "partition_regions",
    "merge_regions",
    "co_attention",
    "CoAttention",
    "ShiftNet",
    "resample",
    "IGTRBlock",
]

# full: local then non-local; igtr-l: local only; igtr-g: non-local only;
# sa: self-attention on reflectance; cat-i / cat-f: no attention at all
IGTR_VARIANTS = ("full", "igtr-l", "igtr-g", "sa", "cat-i", "cat-f")


def default_region_sizes(n_scales: int = 5, deepest: int = 4, cap: int = 8) -> tuple[int, ...]:
    """Region side per scale, finest first: ``deepest`` at the last scale, doubling upward, capped."""
    return tuple(min(cap, deepest * 2 ** (n_scales - 1 - i)) for i in range(n_scales))


@dataclass(frozen=True)
class IGTRConfig:
    variant: str = "full"
    region_sizes: tuple[int, ...] = default_region_sizes()
    offset_radius_frac: float = 0.5

    def __post_init__(self):
        if self.variant not in IGTR_VARIANTS:
            raise ValueError(f"unknown IGTR variant {self.variant!r}; choose from {IGTR_VARIANTS}")
        if any(k < 1 for k in self.region_sizes):
            raise ValueError("region sizes must be positive")


# ---------------------------------------------------------------- regions

def partition_regions(f: torch.Tensor, k: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B * nH * nW, K*K, C)`` tokens, regions in row-major order."""
    b, c, h, w = f.shape
    if h % k or w % k:
        raise ValueError(f"feature map {h}x{w} not divisible by region size {k}")
    x = f.reshape(b, c, h // k, k, w // k, k)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b * (h // k) * (w // k), k * k, c)


def merge_regions(tokens: torch.Tensor, k: int, shape: tuple[int, int, int, int]) -> torch.Tensor:
    b, c, h, w = shape
    x = tokens.reshape(b, h // k, w // k, k, k, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


# ---------------------------------------------------------------- attention

def co_attention(q_tokens, kv_tokens, wq, wk, wv, bq=None, bk=None, bv=None, return_weights: bool = False):
    """Single-head attention with queries from ``q_tokens`` and keys/values from ``kv_tokens``.

    Tokens are ``(N, T, C)``; projection matrices are ``(C', C)``. Scaling uses
    the projected key width.
    """
    if q_tokens.shape[:2] != kv_tokens.shape[:2]:
        raise ValueError(f"token layout mismatch: {tuple(q_tokens.shape)} vs {tuple(kv_tokens.shape)}")
    q = F.linear(q_tokens, wq, bq)
    k = F.linear(kv_tokens, wk, bk)
    v = F.linear(kv_tokens, wv, bv)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query and key projections must have the same width")
    logits = q @ k.transpose(-1, -2) / math.sqrt(k.shape[-1])
    attn = torch.softmax(logits, dim=-1)
    out = attn @ v
    return (out, attn) if return_weights else out


class CoAttention(nn.Module):
    """Region-wise co-attention: halved q/k/v projections and a bias-free output projection."""

    def __init__(self, channels: int):
        super().__init__()
        d = max(1, channels // 2)
        self.q = nn.Conv2d(channels, d, 1)
        self.k = nn.Conv2d(channels, d, 1)
        self.v = nn.Conv2d(channels, d, 1)
        self.proj = nn.Conv2d(d, channels, 1, bias=False)
        self.head_dim = d

    def _w(self, conv):
        return conv.weight[:, :, 0, 0], conv.bias

    def forward(self, f_q: torch.Tensor, f_kv: torch.Tensor, k: int, return_weights: bool = False):
        if f_q.shape != f_kv.shape:
            raise ValueError(f"feature shapes differ: {tuple(f_q.shape)} vs {tuple(f_kv.shape)}")
        shape = f_q.shape
        (wq, bq), (wk, bk), (wv, bv) = self._w(self.q), self._w(self.k), self._w(self.v)
        out, attn = co_attention(
            partition_regions(f_q, k), partition_regions(f_kv, k), wq, wk, wv, bq, bk, bv, return_weights=True
        )
        b, _, h, w = shape
        out = merge_regions(out, k, (b, self.head_dim, h, w))
        out = self.proj(out)
        return (out, attn) if return_weights else out


# ---------------------------------------------------------------- offsets and resampling

class ShiftNet(nn.Module):
    """Two-layer conv head emitting per-pixel ``(dx, dy)`` offsets bounded by ``radius``."""

    def __init__(self, channels: int, radius: float):
        super().__init__()
        self.radius = float(radius)
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(channels, 2, 3, 1, 1),
        )
        nn.init.zeros_(self.body[2].weight)
        nn.init.zeros_(self.body[2].bias)

    def forward(self, f):
        return torch.tanh(self.body(f)) * self.radius


def resample(f: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """Bilinear gather of ``f`` at ``(x + dx, y + dy)`` with coordinates clamped to the map.

    ``offsets`` is ``(B, 2, H, W)`` in pixels, channel 0 horizontal, channel 1
    vertical. Zero offsets return ``f`` exactly.
    """
    b, c, h, w = f.shape
    if offsets.shape != (b, 2, h, w):
        raise ValueError(f"offsets must be {(b, 2, h, w)}, got {tuple(offsets.shape)}")
    if not torch.all(torch.isfinite(offsets)):
        raise ValueError("non-finite offsets")
    ys = torch.arange(h, dtype=f.dtype, device=f.device).view(1, h, 1)
    xs = torch.arange(w, dtype=f.dtype, device=f.device).view(1, 1, w)
    x = (xs + offsets[:, 0].to(f.dtype)).clamp(0, w - 1)
    y = (ys + offsets[:, 1].to(f.dtype)).clamp(0, h - 1)
    x0 = x.detach().floor().clamp(0, w - 1)
    y0 = y.detach().floor().clamp(0, h - 1)
    wx = x - x0
    wy = y - y0
    x0i, y0i = x0.long(), y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)
    flat = f.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    wx, wy = wx[:, None], wy[:, None]
    return (
        gather(y0i, x0i) * ((1 - wx) * (1 - wy))
        + gather(y0i, x1i) * (wx * (1 - wy))
        + gather(y1i, x0i) * ((1 - wx) * wy)
        + gather(y1i, x1i) * (wx * wy)
    )


# ---------------------------------------------------------------- block

class IGTRBlock(nn.Module):
    """Fuse reflectance and illumination features at one scale."""

    def __init__(self, channels: int, region_size: int, variant: str = "full", offset_radius_frac: float = 0.5):
        super().__init__()
        if variant not in IGTR_VARIANTS:
            raise ValueError(f"unknown IGTR variant {variant!r}")
        self.variant = variant
        self.k = region_size
        if variant in ("full", "igtr-l", "sa"):
            self.local = CoAttention(channels)
        if variant in ("full", "igtr-g"):
            self.shift = ShiftNet(channels, radius=region_size * offset_radius_frac)
            self.nonlocal_ = CoAttention(channels)
        if variant == "cat-f":
            self.fuse = nn.Sequential(nn.Conv2d(2 * channels, channels, 1), nn.LeakyReLU(0.2, inplace=True))

    def local_enhance(self, f_r, f_l):
        return self.local(f_r, f_l, self.k) + f_r

    def nonlocal_enhance(self, f_le, f_l_hat):
        return self.nonlocal_(f_le, f_l_hat, self.k) + f_le

    def forward(self, f_r: torch.Tensor, f_l: torch.Tensor) -> torch.Tensor:
        v = self.variant
        if v == "full":
            f_le = self.local_enhance(f_r, f_l)
            return self.nonlocal_enhance(f_le, resample(f_l, self.shift(f_le)))
        if v == "igtr-l":
            return self.local_enhance(f_r, f_l)
        if v == "igtr-g":
            return self.nonlocal_enhance(f_r, resample(f_l, self.shift(f_r)))
        if v == "sa":
            return self.local_enhance(f_r, f_r)
        if v == "cat-f":
            return self.fuse(torch.cat([f_r, f_l], dim=1))
        return f_r  # cat-i: fusion happened at the network input
