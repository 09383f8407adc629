"""Shadow-aware reflectance/illumination decomposition network and its self-supervised losses.

All tensors are ``(B, C, H, W)``. The losses are per-element means, so a
batch loss equals the mean of the per-sample losses.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "DecompNetConfig",
    "DecompositionPair",
    "DecompositionNet",
    "build_decomposition_net",
    "decompose",
    "spatial_gradient",
    "loss_fidelity",
    "loss_illumination",
    "loss_reflectance",
    "loss_decomposition_total",
    "DecompLosses",
    "decomposition_losses",
    "LAMBDA_N",
    "W_REF",
    "HINGE_EPS",
]

LAMBDA_N = -20.0
W_REF = 0.1
HINGE_EPS = 1e-3
DEPTH = 5


@dataclass(frozen=True)
class DecompNetConfig:
    base_channels: int = 16
    skip_connections: bool = True
    encoder_layers: int = DEPTH
    kernel: int = 4
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        if (self.encoder_layers, self.kernel, self.stride, self.padding) != (DEPTH, 4, 2, 1):
            raise ValueError("decomposition layers are fixed at 5 x (kernel 4, stride 2, padding 1)")
        if self.base_channels < 8:
            raise ValueError("base_channels must be at least 8")


class DecompositionPair(NamedTuple):
    reflectance: torch.Tensor
    illumination: torch.Tensor


def _widths(base: int) -> list[int]:
    return [base * m for m in (1, 2, 4, 8, 8)]


class _Decoder(nn.Module):
    def __init__(self, widths: list[int], in_ch: int, skips: bool):
        super().__init__()
        self.skips = skips
        layers = []
        prev = widths[-1]
        # decoder stage k upsamples to the resolution of encoder stage DEPTH-2-k
        for k in range(DEPTH):
            out = widths[DEPTH - 2 - k] if k < DEPTH - 1 else widths[0]
            layers.append(
                nn.Sequential(
                    nn.ConvTranspose2d(prev, out, 4, 2, 1),
                    nn.InstanceNorm2d(out, affine=True),
                    nn.ReLU(inplace=True),
                )
            )
            prev = out + (widths[DEPTH - 2 - k] if skips and k < DEPTH - 1 else 0)
        self.layers = nn.ModuleList(layers)
        head_in = widths[0] + (in_ch if skips else 0)
        self.head = nn.Conv2d(head_in, 3, 3, 1, 1)

    def forward(self, x, feats):
        h = feats[-1]
        for k, layer in enumerate(self.layers):
            h = layer(h)
            if self.skips:
                skip = feats[DEPTH - 2 - k] if k < DEPTH - 1 else x
                h = torch.cat([h, skip], dim=1)
        return torch.sigmoid(self.head(h))


class DecompositionNet(nn.Module):
    """Shared encoder with separate reflectance and illumination decoders.

    Input is the RGB image concatenated with its shadow mask (4 channels).
    """

    def __init__(self, cfg: DecompNetConfig = DecompNetConfig()):
        super().__init__()
        self.cfg = cfg
        widths = _widths(cfg.base_channels)
        enc = []
        prev = 4
        for wdt in widths:
            enc.append(
                nn.Sequential(
                    nn.Conv2d(prev, wdt, 4, 2, 1),
                    nn.InstanceNorm2d(wdt, affine=True),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
            prev = wdt
        self.encoder = nn.ModuleList(enc)
        self.reflectance_decoder = _Decoder(widths, 4, cfg.skip_connections)
        self.illumination_decoder = _Decoder(widths, 4, cfg.skip_connections)

    @staticmethod
    def check_size(h: int, w: int) -> None:
        div = 2**DEPTH
        if h % div or w % div:
            raise ValueError(f"spatial size {h}x{w} is not divisible by {div}")
        if min(h, w) < 2 * div:
            # instance norm needs more than one element at the 1/32 bottleneck
            raise ValueError(f"spatial size {h}x{w} is below the minimum {2 * div}")

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for layer in self.encoder:
            h = layer(h)
            feats.append(h)
        return feats

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> DecompositionPair:
        if mask.dim() == 3:
            mask = mask[:, None]
        if image.shape[-2:] != mask.shape[-2:] or image.shape[0] != mask.shape[0]:
            raise ValueError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} differ in size")
        self.check_size(*image.shape[-2:])
        x = torch.cat([image, mask.to(image.dtype)], dim=1)
        feats = self.encode(x)
        return DecompositionPair(
            self.reflectance_decoder(x, feats), self.illumination_decoder(x, feats)
        )


def build_decomposition_net(cfg: DecompNetConfig = DecompNetConfig(), size: tuple[int, int] | None = None):
    if size is not None:
        DecompositionNet.check_size(*size)
    return DecompositionNet(cfg)


def decompose(net: DecompositionNet, image: torch.Tensor, mask: torch.Tensor | None = None) -> DecompositionPair:
    """Run ``net`` on ``image``; ``mask=None`` attaches the all-zero map used for shadow-free inputs."""
    if mask is None:
        mask = torch.zeros_like(image[:, :1])
    return net(image, mask)


# ---------------------------------------------------------------- losses

def _same_shape(*ts):
    s = ts[0].shape
    for t in ts[1:]:
        if t.shape != s:
            raise ValueError(f"shape mismatch: {tuple(s)} vs {tuple(t.shape)}")


def spatial_gradient(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along rows and columns; replicate boundary (last difference is 0)."""
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    return dy, dx


def loss_fidelity(r_s, l_s, i_s, r_sf, l_sf, i_sf):
    _same_shape(r_s, l_s, i_s, r_sf, l_sf, i_sf)
    return (r_s * l_s - i_s).abs().mean() + (r_sf * l_sf - i_sf).abs().mean()


def loss_illumination(r_s, r_sf, l_s, l_sf, i_s, i_sf):
    _same_shape(r_s, r_sf, l_s, l_sf, i_s, i_sf)
    return (
        (r_s - r_sf).abs().mean()
        + (r_s * l_sf - i_sf).abs().mean()
        + (r_sf * l_s - i_s).abs().mean()
    )


def _edge_aware(l_sf, r, lambda_n):
    gl = spatial_gradient(l_sf)
    gr = spatial_gradient(r)
    return sum((a * torch.exp(lambda_n * b.abs())).abs().mean() for a, b in zip(gl, gr))


def loss_reflectance(r_s, r_sf, l_sf, lambda_n: float = LAMBDA_N, eps: float = HINGE_EPS, parts: bool = False):
    """Edge-aware illumination smoothness plus the ordering hinge ``R < L_sf``.

    The shadow illumination layer is intentionally not an argument. With
    ``parts=True`` returns ``(gradient_term, hinge_term)``.
    """
    _same_shape(r_s, r_sf, l_sf)
    grad_term = _edge_aware(l_sf, r_s, lambda_n) + _edge_aware(l_sf, r_sf, lambda_n)
    hinge = F.relu(r_s - l_sf + eps).mean() + F.relu(r_sf - l_sf + eps).mean()
    if parts:
        return grad_term, hinge
    return grad_term + hinge


def loss_decomposition_total(l_fid, l_ill, l_ref, w_r: float = W_REF):
    return l_fid + l_ill + w_r * l_ref


class DecompLosses(NamedTuple):
    total: torch.Tensor
    fidelity: torch.Tensor
    illumination: torch.Tensor
    reflectance: torch.Tensor


def decomposition_losses(shadow: DecompositionPair, free: DecompositionPair, i_s, i_sf, w_r: float = W_REF) -> DecompLosses:
    r_s, l_s = shadow
    r_sf, l_sf = free
    fid = loss_fidelity(r_s, l_s, i_s, r_sf, l_sf, i_sf)
    ill = loss_illumination(r_s, r_sf, l_s, l_sf, i_s, i_sf)
    ref = loss_reflectance(r_s, r_sf, l_sf)
    return DecompLosses(loss_decomposition_total(fid, ill, ref, w_r), fid, ill, ref)
