"""Bilateral correction network: reflectance / corrected-illumination encoders fused by IGTR."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .igtr import IGTRBlock, IGTRConfig

__all__ = [
    "FUSIONS",
    "TABLE6_VARIANTS",
    "BilateralNetConfig",
    "bilateral_variant",
    "BilateralNet",
    "build_bilateral_net",
    "restore",
    "PerceptualExtractor",
    "RandomFeatureExtractor",
    "VGGFeatureExtractor",
    "build_extractor",
    "loss_restoration",
    "LAMBDA_VGG",
]

LAMBDA_VGG = 0.1
SCALES = 5
FUSIONS = ("igtr", "cat-i", "cat-f", "multiply")

# ablation column name -> (fusion, igtr variant)
TABLE6_VARIANTS = {
    "multiply": ("multiply", "full"),
    "cat-i": ("cat-i", "cat-i"),
    "cat-f": ("cat-f", "cat-f"),
    "sa": ("igtr", "sa"),
    "igtr-g": ("igtr", "igtr-g"),
    "igtr-l": ("igtr", "igtr-l"),
    "full": ("igtr", "full"),
}


@dataclass(frozen=True)
class BilateralNetConfig:
    base_channels: int = 16
    fusion: str = "igtr"
    igtr: IGTRConfig = field(default_factory=IGTRConfig)
    scales: int = SCALES

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; choose from {FUSIONS}")
        if self.scales != SCALES:
            raise ValueError("the bilateral network has exactly 5 scales")
        if self.fusion == "igtr" and self.igtr.variant in ("cat-i", "cat-f"):
            object.__setattr__(self, "fusion", self.igtr.variant)
        if self.fusion in ("cat-i", "cat-f") and self.igtr.variant != self.fusion:
            object.__setattr__(self, "igtr", IGTRConfig(self.fusion, self.igtr.region_sizes, self.igtr.offset_radius_frac))

    @property
    def variant(self) -> str:
        return "multiply" if self.fusion == "multiply" else self.igtr.variant


def bilateral_variant(name: str, base_channels: int = 16, **igtr_kw) -> BilateralNetConfig:
    try:
        fusion, v = TABLE6_VARIANTS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown fusion variant {name!r}; choose from {sorted(TABLE6_VARIANTS)}") from None
    return BilateralNetConfig(base_channels=base_channels, fusion=fusion, igtr=IGTRConfig(variant=v, **igtr_kw))


def check_size(h: int, w: int) -> None:
    div = 2**SCALES
    if h % div or w % div:
        raise ValueError(f"spatial size {h}x{w} not divisible by {div}")
    if min(h, w) < 2 * div:
        raise ValueError(f"spatial size {h}x{w} is below the minimum {2 * div}")


def _widths(base):
    return [base * m for m in (1, 2, 4, 8, 8)]


class _Encoder(nn.Module):
    def __init__(self, cin, widths):
        super().__init__()
        layers = []
        for w in widths:
            layers.append(
                nn.Sequential(nn.Conv2d(cin, w, 4, 2, 1), nn.InstanceNorm2d(w, affine=True), nn.LeakyReLU(0.2, inplace=True))
            )
            cin = w
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


class BilateralNet(nn.Module):
    """Two encoder streams fused per scale, decoded with shadow-image skip features.

    ``fusion='multiply'`` has no parameters and returns ``clamp(R_s * L_hat)``.
    """

    def __init__(self, cfg: BilateralNetConfig = BilateralNetConfig()):
        super().__init__()
        self.cfg = cfg
        if cfg.fusion == "multiply":
            return
        widths = _widths(cfg.base_channels)
        if cfg.fusion == "cat-i":
            self.enc_rl = _Encoder(6, widths)
        else:
            self.enc_r = _Encoder(3, widths)
            self.enc_l = _Encoder(3, widths)
            self.blocks = nn.ModuleList(
                IGTRBlock(w, k, cfg.igtr.variant, cfg.igtr.offset_radius_frac)
                for w, k in zip(widths, cfg.igtr.region_sizes)
            )
        img_widths = [max(8, w // 2) for w in widths]
        self.enc_img = _Encoder(4, img_widths)
        ups = []
        prev = widths[-1] + img_widths[-1]
        for i in range(SCALES - 1, -1, -1):
            out = widths[i - 1] if i > 0 else widths[0]
            ups.append(
                nn.Sequential(nn.ConvTranspose2d(prev, out, 4, 2, 1), nn.InstanceNorm2d(out, affine=True), nn.ReLU(inplace=True))
            )
            prev = out + (widths[i - 1] + img_widths[i - 1] if i > 0 else 0)
        self.ups = nn.ModuleList(ups)
        # full-resolution head sees the decoder output plus raw inputs
        self.head = nn.Sequential(
            nn.Conv2d(prev + 10, widths[0], 3, 1, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(widths[0], 3, 3, 1, 1),
        )

    def region_sizes(self, h: int, w: int) -> list[int]:
        sizes = []
        for i, k in enumerate(self.cfg.igtr.region_sizes):
            hi, wi = h >> (i + 1), w >> (i + 1)
            k = min(k, hi, wi)
            while hi % k or wi % k:
                k -= 1
            sizes.append(k)
        return sizes

    def forward(self, r_s, l_hat, image, mask):
        if not (r_s.shape == l_hat.shape == image.shape):
            raise ValueError(f"shape mismatch: {tuple(r_s.shape)}, {tuple(l_hat.shape)}, {tuple(image.shape)}")
        if mask.dim() == 3:
            mask = mask[:, None]
        h, w = r_s.shape[-2:]
        check_size(h, w)
        if self.cfg.fusion == "multiply":
            return (r_s * l_hat).clamp(0.0, 1.0)
        mask = mask.to(r_s.dtype)
        if self.cfg.fusion == "cat-i":
            fused = self.enc_rl(torch.cat([r_s, l_hat], dim=1))
        else:
            for blk, k in zip(self.blocks, self.region_sizes(h, w)):
                blk.k = k
            fused = [blk(fr, fl) for blk, fr, fl in zip(self.blocks, self.enc_r(r_s), self.enc_l(l_hat))]
        img = self.enc_img(torch.cat([image, mask], dim=1))
        x = torch.cat([fused[-1], img[-1]], dim=1)
        for j, up in enumerate(self.ups):
            x = up(x)
            i = SCALES - 2 - j
            if i >= 0:
                x = torch.cat([x, fused[i], img[i]], dim=1)
        x = torch.cat([x, image, r_s, l_hat, mask], dim=1)
        return torch.sigmoid(self.head(x))


def build_bilateral_net(cfg: BilateralNetConfig = BilateralNetConfig(), size: tuple[int, int] | None = None) -> BilateralNet:
    if size is not None:
        check_size(*size)
    return BilateralNet(cfg)


def restore(net: BilateralNet, r_s, l_hat, image, mask) -> torch.Tensor:
    return net(r_s, l_hat, image, mask)


# ---------------------------------------------------------------- perceptual loss

class PerceptualExtractor(nn.Module):
    """Frozen feature pyramid; ``forward`` returns the designated activations."""

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        return super().train(False)


class RandomFeatureExtractor(PerceptualExtractor):
    """Seeded random conv pyramid standing in for a pretrained classifier."""

    def __init__(self, widths=(16, 32, 64), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, 2 if i else 1, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = w
        self.layers = nn.ModuleList(layers)
        self.freeze()

    def forward(self, x):
        feats = []
        for conv in self.layers:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


class VGGFeatureExtractor(PerceptualExtractor):
    """torchvision VGG16 activations relu1_2, relu2_2, relu3_3 (needs local pretrained weights)."""

    def __init__(self, cuts=(4, 9, 16)):
        super().__init__()
        from torchvision.models import VGG16_Weights, vgg16

        features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
        self.slices = nn.ModuleList()
        prev = 0
        for c in cuts:
            self.slices.append(features[prev:c])
            prev = c
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.freeze()

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for s in self.slices:
            x = s(x)
            feats.append(x)
        return feats


def build_extractor(name: str = "random") -> PerceptualExtractor:
    if name == "random":
        return RandomFeatureExtractor()
    if name == "vgg":
        return VGGFeatureExtractor()
    raise ValueError(f"unknown perceptual extractor {name!r}")


def loss_restoration(pred, target, extractor=None, lambda_vgg: float = LAMBDA_VGG):
    """Pixel L1 plus ``lambda_vgg`` times the summed L1 distance of extractor activations."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    loss = (pred - target).abs().mean()
    if extractor is not None and lambda_vgg:
        with torch.no_grad():
            target_feats = extractor(target)
        for fp, ft in zip(extractor(pred), target_feats):
            loss = loss + lambda_vgg * (fp - ft).abs().mean()
    return loss
