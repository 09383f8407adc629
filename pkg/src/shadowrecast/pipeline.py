"""End-to-end inference: decomposition, local lighting correction, texture restoration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import LLCConfig, NoiseUNet, sample_llc
from .decomposition import DecompositionNet
from .imaging import as_image, as_mask, resize_image, resize_mask
from .restoration import BilateralNet
from .training import load_bilateral, load_decomposition, load_noise_net, to_image, to_tensor

__all__ = ["InferenceResult", "ShadowRemover", "infer"]


@dataclass
class InferenceResult:
    image: np.ndarray
    reflectance: np.ndarray | None = None
    illumination: np.ndarray | None = None
    corrected_illumination: np.ndarray | None = None

    def intermediates(self) -> dict[str, np.ndarray]:
        d = {"R_s": self.reflectance, "L_s": self.illumination, "L_hat_s": self.corrected_illumination}
        return {k: v for k, v in d.items() if v is not None}


class ShadowRemover:
    def __init__(self, decomposition: DecompositionNet, noise_net: NoiseUNet, llc: LLCConfig, restoration: BilateralNet, resolution: int):
        self.decomposition = decomposition.eval()
        self.noise_net = noise_net.eval()
        self.llc = llc
        self.restoration = restoration.eval()
        self.resolution = resolution

    @classmethod
    def from_checkpoints(cls, decomp_ckpt, diff_ckpt, restore_ckpt, resolution: int | None = None) -> "ShadowRemover":
        shadow_net, _, dcfg = load_decomposition(decomp_ckpt)
        noise_net, ncfg = load_noise_net(diff_ckpt)
        bilateral, _ = load_bilateral(restore_ckpt)
        return cls(shadow_net, noise_net, ncfg.llc, bilateral, resolution or dcfg.train.resolution)

    def with_restoration(self, restoration: BilateralNet) -> "ShadowRemover":
        return ShadowRemover(self.decomposition, self.noise_net, self.llc, restoration, self.resolution)

    @torch.no_grad()
    def __call__(self, image, mask, seed: int = 0, intermediates: bool = False) -> InferenceResult:
        image = as_image(image)
        mask = as_mask(mask, like=image)
        orig = image.shape[:2]
        size = (self.resolution, self.resolution)
        img_r = resize_image(image, size)
        m_r = resize_mask(mask, size)
        i_s, m = to_tensor(img_r), to_tensor(m_r)
        r_s, l_s = self.decomposition(i_s, m)
        gen = torch.Generator().manual_seed(seed)
        l_hat = sample_llc(self.noise_net, l_s, m, self.llc, gen)
        pred = to_image(self.restoration(r_s, l_hat, i_s, m))
        if pred.shape[:2] != orig:
            pred = resize_image(pred, orig)
        res = InferenceResult(np.clip(pred, 0.0, 1.0))
        if intermediates:
            res.reflectance = to_image(r_s)
            res.illumination = to_image(l_s)
            res.corrected_illumination = to_image(l_hat)
        return res


def infer(image, mask, decomp_ckpt, diff_ckpt, restore_ckpt, seed: int = 0, intermediates: bool = False) -> InferenceResult:
    return ShadowRemover.from_checkpoints(decomp_ckpt, diff_ckpt, restore_ckpt)(image, mask, seed, intermediates)
