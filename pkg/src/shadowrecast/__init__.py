"""Two-stage shadow removal: retinex-style decomposition, diffusion lighting correction, texture restoration."""

from .config import RunConfig, TrainConfig, load_config, preset
from .decomposition import DecompNetConfig, DecompositionNet, decompose
from .diffusion import LLCConfig, make_schedule, sample_llc
from .igtr import IGTRBlock, IGTRConfig
from .imaging import ShadowSample, augment, load_image, load_mask, rgb_to_lab, synth_shadow
from .metrics import RegionReport, ber_per, psnr, region_report, rmse_lab, ssim
from .restoration import BilateralNet, BilateralNetConfig

__version__ = "0.1.0"
