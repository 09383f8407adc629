"""Run configuration, presets and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .decomposition import DecompNetConfig
from .diffusion import LLC_VARIANTS, LLCConfig, UNetConfig, llc_variant
from .igtr import IGTRConfig
from .restoration import TABLE6_VARIANTS, BilateralNetConfig, bilateral_variant

__all__ = ["TrainConfig", "RunConfig", "PRESETS", "preset", "parse_config_text", "load_config", "apply_variant"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 4
    iters_decomp: int = 2000
    iters_diffusion: int = 2000
    iters_restore: int = 2000
    warmup_frac: float = 0.05
    seed: int = 0
    resolution: int = 64
    decomp_channels: int = 8
    unet_channels: int = 16
    unet_mult: tuple[int, ...] = (1, 2, 4)
    restore_channels: int = 16
    extractor: str = "random"
    n_samples: int = 32
    checkpoint_every: int = 500

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "iters_decomp", "iters_diffusion", "iters_restore", "resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.resolution % 32:
            raise ValueError("resolution must be divisible by 32")

    def warmup_steps(self, total: int) -> int:
        return min(total - 1, max(1, round(self.warmup_frac * total))) if total > 1 else 0


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    llc: LLCConfig = field(default_factory=LLCConfig)
    igtr: IGTRConfig = field(default_factory=IGTRConfig)
    fusion: str = "igtr"

    @property
    def decomp_net(self) -> DecompNetConfig:
        return DecompNetConfig(base_channels=self.train.decomp_channels)

    @property
    def unet(self) -> UNetConfig:
        return UNetConfig(base_channels=self.train.unet_channels, channel_mult=tuple(self.train.unet_mult))

    @property
    def bilateral(self) -> BilateralNetConfig:
        return BilateralNetConfig(base_channels=self.train.restore_channels, fusion=self.fusion, igtr=self.igtr)

    def to_dict(self) -> dict:
        d = {}
        for part in (self.train, self.llc, self.igtr):
            d.update(dataclasses.asdict(part))
        d["fusion"] = self.fusion
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls().replace(**d)

    def replace(self, **kw) -> "RunConfig":
        groups = {"train": {}, "llc": {}, "igtr": {}}
        top = {}
        names = {g: {f.name: f for f in fields(type(getattr(self, g)))} for g in groups}
        for key, value in kw.items():
            if key == "fusion":
                top["fusion"] = value
                continue
            for g, fs in names.items():
                if key in fs:
                    groups[g][key] = _coerce(fs[key], value)
                    break
            else:
                raise KeyError(f"unknown config key {key!r}")
        new = {g: dataclasses.replace(getattr(self, g), **v) for g, v in groups.items() if v}
        return dataclasses.replace(self, **new, **top)


def _coerce(f, value):
    if not isinstance(value, str):
        return tuple(value) if isinstance(value, list) else value
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value.strip()


PRESETS = {
    "desk": {},
    "paper": {
        "batch_size": 12,
        "iters_decomp": 100_000,
        "iters_diffusion": 200_000,
        "iters_restore": 200_000,
        "resolution": 256,
        "decomp_channels": 64,
        "unet_channels": 128,
        "unet_mult": (1, 1, 2, 2, 4, 4),
        "restore_channels": 32,
        "checkpoint_every": 5000,
    },
}


def preset(name: str = "desk") -> RunConfig:
    try:
        return RunConfig().replace(**PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``:`` is accepted as separator."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ValueError(f"line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split(sep, 1))
        out[key] = value
    return out


def apply_variant(cfg: RunConfig, name: str) -> RunConfig:
    """Apply an ablation name: LLC rows ``a``-``d``/``ours`` or fusion columns."""
    key = name.lower()
    if key in LLC_VARIANTS:
        llc = llc_variant(key, schedule_train=cfg.llc.schedule_train, schedule_test=cfg.llc.schedule_test)
        return dataclasses.replace(cfg, llc=llc)
    if key in TABLE6_VARIANTS:
        b = bilateral_variant(
            key,
            base_channels=cfg.train.restore_channels,
            region_sizes=cfg.igtr.region_sizes,
            offset_radius_frac=cfg.igtr.offset_radius_frac,
        )
        return dataclasses.replace(cfg, fusion=b.fusion, igtr=b.igtr)
    raise ValueError(f"unknown variant {name!r}; choose from {sorted(LLC_VARIANTS) + sorted(TABLE6_VARIANTS)}")


def load_config(path=None, preset_name: str = "desk", overrides: dict | None = None) -> RunConfig:
    cfg = preset(preset_name)
    if path is not None:
        cfg = cfg.replace(**parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg
