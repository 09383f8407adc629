"""Local lighting correction with a mask-conditioned DDPM.

Timesteps are 1-based: ``t`` in ``[1, T]``, and ``alpha_bar[t-1]`` is the
cumulative product of ``1 - beta`` up to and including step ``t``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "schedule_preset",
    "SCHEDULE_PRESETS",
    "forward_diffuse",
    "build_condition",
    "LLCConfig",
    "CONDITION_MODES",
    "DENOISE_RANGES",
    "LLC_VARIANTS",
    "llc_variant",
    "UNetConfig",
    "NoiseUNet",
    "build_noise_net",
    "net_input",
    "denoise_loss",
    "EmptyMaskWarning",
    "SamplingError",
    "matched_timesteps",
    "sample_llc",
]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def index(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return t.astype(np.int64) - 1


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with precomputed cumulative alpha product (float64)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T, beta_start, beta_end, beta, alpha_bar)


SCHEDULE_PRESETS = {
    "train-1000": (1000, 1e-4, 0.02),
    "test-50": (50, 1e-4, 0.5),
}


def schedule_preset(name: str) -> NoiseSchedule:
    try:
        return make_schedule(*SCHEDULE_PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown schedule preset {name!r}; choose from {sorted(SCHEDULE_PRESETS)}") from None


def _per_sample(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t)
    v = torch.as_tensor(values, dtype=torch.float64)[t.reshape(-1)]
    return v.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(x0: torch.Tensor, t, epsilon: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is an int or a per-sample tensor."""
    idx = sched.index(t.cpu().numpy() if torch.is_tensor(t) else t)
    ab = _per_sample(sched.alpha_bar, idx, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * epsilon


def build_condition(x_t: torch.Tensor, x0: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Noisy iterate inside the shadow, clean layer outside it."""
    if mask.dim() == x_t.dim() - 1:
        mask = mask[:, None]
    if x_t.shape != x0.shape or mask.shape[-2:] != x_t.shape[-2:]:
        raise ValueError(f"shape mismatch: x_t {tuple(x_t.shape)}, x0 {tuple(x0.shape)}, mask {tuple(mask.shape)}")
    mask = mask.to(x_t.dtype)
    return mask * x_t + (1.0 - mask) * x0


# ---------------------------------------------------------------- configuration

CONDITION_MODES = ("ls-only", "ls-plus-mask", "ls-plus-ct")
DENOISE_RANGES = ("local", "global")

LLC_VARIANTS = {
    "a": ("ls-only", "global"),
    "b": ("ls-only", "local"),
    "c": ("ls-plus-mask", "global"),
    "d": ("ls-plus-mask", "local"),
    "ours": ("ls-plus-ct", "local"),
}


@dataclass(frozen=True)
class LLCConfig:
    condition_mode: str = "ls-plus-ct"
    denoise_range: str = "local"
    schedule_train: str = "train-1000"
    schedule_test: str = "test-50"

    def __post_init__(self):
        object.__setattr__(self, "condition_mode", self.condition_mode.lower())
        object.__setattr__(self, "denoise_range", self.denoise_range.lower())
        if self.condition_mode not in CONDITION_MODES:
            raise ValueError(f"condition_mode must be one of {CONDITION_MODES}, got {self.condition_mode!r}")
        if self.denoise_range not in DENOISE_RANGES:
            raise ValueError(f"denoise_range must be one of {DENOISE_RANGES}, got {self.denoise_range!r}")
        schedule_preset(self.schedule_train)
        schedule_preset(self.schedule_test)

    @property
    def local(self) -> bool:
        return self.denoise_range == "local"

    @property
    def in_channels(self) -> int:
        return 7 if self.condition_mode == "ls-plus-mask" else 6

    @property
    def train(self) -> NoiseSchedule:
        return schedule_preset(self.schedule_train)

    @property
    def test(self) -> NoiseSchedule:
        return schedule_preset(self.schedule_test)


def llc_variant(name: str, **kw) -> LLCConfig:
    """Config for an ablation row: ``a``-``d`` or ``ours``."""
    try:
        mode, rng = LLC_VARIANTS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown LLC variant {name!r}; choose from {sorted(LLC_VARIANTS)}") from None
    return LLCConfig(condition_mode=mode, denoise_range=rng, **kw)


def net_input(cfg: LLCConfig, x_t, x0, l_s, mask) -> torch.Tensor:
    """Assemble the channel stack seen by the noise network for ``cfg.condition_mode``."""
    if mask.dim() == x_t.dim() - 1:
        mask = mask[:, None]
    if cfg.condition_mode == "ls-plus-ct":
        return torch.cat([build_condition(x_t, x0, mask), l_s], dim=1)
    if cfg.condition_mode == "ls-plus-mask":
        return torch.cat([x_t, l_s, mask.to(x_t.dtype)], dim=1)
    return torch.cat([x_t, l_s], dim=1)


# ---------------------------------------------------------------- noise network

def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch):
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, 1, 1)
        self.temb = nn.Linear(temb, cout * 2)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.temb(F.silu(emb))[..., None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    time_dim: int = 64

    def __post_init__(self):
        if self.base_channels < 8 or not self.channel_mult:
            raise ValueError("UNet needs base_channels >= 8 and at least one resolution")


class NoiseUNet(nn.Module):
    """Compact UNet with scale-shift time conditioning in every residual block.

    The output convolution starts at zero so an untrained net predicts no noise.
    """

    def __init__(self, in_channels: int, cfg: UNetConfig = UNetConfig(), out_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        c0 = cfg.base_channels
        widths = [c0 * m for m in cfg.channel_mult]
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim * 2), nn.SiLU(), nn.Linear(cfg.time_dim * 2, cfg.time_dim * 2)
        )
        temb = cfg.time_dim * 2
        self.stem = nn.Conv2d(in_channels, c0, 3, 1, 1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = c0
        for i, w in enumerate(widths):
            self.down_blocks.append(ResBlock(prev, w, temb))
            prev = w
            if i < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(w, w, 3, 2, 1))
        self.mid = ResBlock(prev, prev, temb)
        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            self.up_blocks.append(ResBlock(prev + w, w, temb))
            prev = w
            if i > 0:
                self.upsamples.append(nn.ConvTranspose2d(w, widths[i - 1], 4, 2, 1))
                prev = widths[i - 1]
        self.out_norm = _norm(prev)
        self.out = nn.Conv2d(prev, out_channels, 3, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.cfg.channel_mult) - 1)

    def forward(self, x, t):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[-2] % self.divisor or x.shape[-1] % self.divisor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {self.divisor}")
        t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        h = self.mid(h, emb)
        ups = iter(self.upsamples)
        for j, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if j < len(self.up_blocks) - 1:
                h = next(ups)(h)
        return self.out(F.silu(self.out_norm(h)))


def build_noise_net(cfg: LLCConfig = LLCConfig(), unet: UNetConfig = UNetConfig()) -> NoiseUNet:
    return NoiseUNet(cfg.in_channels, unet)


# ---------------------------------------------------------------- training objective

class EmptyMaskWarning(UserWarning):
    pass


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Elementwise MSE over shadow pixels only; ``mask=None`` averages over everything."""
    sq = (pred - target) ** 2
    if mask is None:
        return sq.mean()
    if mask.dim() == sq.dim() - 1:
        mask = mask[:, None]
    mask = mask.to(sq.dtype).expand_as(sq)
    count = mask.sum()
    if count == 0:
        warnings.warn("empty shadow mask: denoising loss defined as 0", EmptyMaskWarning, stacklevel=2)
        return (sq * mask).sum()
    return (sq * mask).sum() / count


def denoise_loss(net, l_sf, l_s, mask, t, epsilon, cfg: LLCConfig = LLCConfig(), sched: NoiseSchedule | None = None):
    """Noise-prediction loss with the shadow-free illumination as the clean target."""
    sched = sched or cfg.train
    x_t = forward_diffuse(l_sf, t, epsilon, sched)
    pred = net(net_input(cfg, x_t, l_sf, l_s, mask), t)
    return masked_mse(pred, epsilon, mask if cfg.local else None)


# ---------------------------------------------------------------- sampling

class SamplingError(RuntimeError):
    pass


def matched_timesteps(test: NoiseSchedule, train: NoiseSchedule) -> np.ndarray:
    """Fractional training timestep with the same noise level as each test step.

    Interpolates ``log(alpha_bar)`` of the training schedule; test levels
    beyond its range are clamped to ``[1, T_train]``.
    """
    x = -np.log(train.alpha_bar)  # increasing in t
    q = -np.log(test.alpha_bar)
    return np.interp(q, x, np.arange(1, train.T + 1, dtype=np.float64))


@torch.no_grad()
def sample_llc(net, l_s: torch.Tensor, mask: torch.Tensor, cfg: LLCConfig = LLCConfig(), generator: torch.Generator | None = None):
    """Iterative local conditional denoising of the shadow illumination layer.

    Ancestral DDPM over the test schedule with ``sigma_t^2 = beta_t``. The
    condition is rebuilt from the current iterate each step with ``x0 = L_s``.
    In local mode the result is composited back onto ``L_s`` outside the mask,
    so non-shadow pixels come back bit-identical. Output is clamped to [0, 1].
    """
    if mask.dim() == l_s.dim() - 1:
        mask = mask[:, None]
    mask = mask.to(l_s.dtype)
    if cfg.local and not torch.any(mask > 0):
        return l_s.clone()
    sched = cfg.test
    net_t = matched_timesteps(sched, cfg.train)
    x = torch.randn(l_s.shape, generator=generator, dtype=l_s.dtype, device=l_s.device)
    for t in range(sched.T, 0, -1):
        beta = float(sched.beta[t - 1])
        ab = float(sched.alpha_bar[t - 1])
        tt = torch.full((l_s.shape[0],), net_t[t - 1], dtype=torch.float32)
        eps = net(net_input(cfg, x, l_s, l_s, mask), tt)
        x = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
        if t > 1:
            x = x + math.sqrt(beta) * torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        if not torch.all(torch.isfinite(x)):
            finite = torch.nan_to_num(x, nan=0.0, posinf=0.0, neginf=0.0)
            raise SamplingError(f"non-finite iterate at step {t} (finite-part norm {finite.norm():.3e})")
    if cfg.local:
        x = torch.where(mask.expand_as(x) > 0, x, l_s)
    return x.clamp(0.0, 1.0)
