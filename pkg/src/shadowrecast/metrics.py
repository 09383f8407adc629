"""Region-restricted evaluation metrics and mask-quality scores.

Every image metric first brings its inputs to the 256 x 256 evaluation
resolution (bilinear; masks re-binarised at 0.5), then restricts to one of the
regions ``S`` (mask = 1), ``NS`` (mask = 0) or ``All``.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .imaging import resize_image, resize_mask, rgb_to_lab

__all__ = [
    "EVAL_RESOLUTION",
    "PSNR_CAP",
    "REGIONS",
    "REPORT_COLUMNS",
    "EmptyRegionError",
    "region_mask",
    "rmse_lab",
    "psnr",
    "ssim",
    "ssim_map",
    "region_mse",
    "MaskScores",
    "ber_per",
    "RegionReport",
    "region_report",
    "aggregate",
    "write_jsonl",
    "write_table",
]

EVAL_RESOLUTION = 256
PSNR_CAP = 99.0
REGIONS = ("S", "NS", "All")
REPORT_COLUMNS = tuple(f"{m}_{r}" for m in ("rmse", "psnr", "ssim") for r in REGIONS)
SSIM_SIGMA = 1.5
SSIM_WIN = 11
K1, K2 = 0.01, 0.03


class EmptyRegionError(ValueError):
    pass


def _prepare(pred, gt, mask, resolution):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mask = np.zeros(gt.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float32)
    if mask.shape != gt.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {gt.shape[:2]}")
    if resolution:
        size = (resolution, resolution)
        pred = resize_image(pred, size)
        gt = resize_image(gt, size)
        mask = resize_mask(mask, size)
    return pred, gt, mask


def region_mask(mask: np.ndarray, region: str) -> np.ndarray:
    if region == "S":
        sel = mask > 0.5
    elif region == "NS":
        sel = mask <= 0.5
    elif region == "All":
        sel = np.ones(mask.shape, dtype=bool)
    else:
        raise ValueError(f"unknown region {region!r}; choose from {REGIONS}")
    if not sel.any():
        raise EmptyRegionError(f"region {region} is empty")
    return sel


def _region_mean(values: np.ndarray, sel: np.ndarray) -> float:
    picked = values[sel]
    return math.fsum(picked.ravel()) / picked.size


def region_mse(pred, gt, mask, region: str) -> float:
    """Mean squared error over the channels of region pixels (no resizing)."""
    sel = region_mask(np.asarray(mask), region)
    sq = (np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2
    return _region_mean(sq, sel)


def rmse_lab(pred, gt, mask=None, region: str = "All", resolution: int | None = EVAL_RESOLUTION) -> float:
    """Root mean squared per-pixel CIE76 colour difference over the region."""
    pred, gt, mask = _prepare(pred, gt, mask, resolution)
    sel = region_mask(mask, region)
    de2 = ((rgb_to_lab(pred) - rgb_to_lab(gt)) ** 2).sum(axis=-1)
    return math.sqrt(_region_mean(de2, sel))


def psnr(pred, gt, mask=None, region: str = "All", resolution: int | None = EVAL_RESOLUTION) -> float:
    """``10 log10(1 / MSE)`` in dB for [0, 1] images; identical inputs give ``PSNR_CAP``."""
    pred, gt, mask = _prepare(pred, gt, mask, resolution)
    mse = region_mse(pred, gt, mask, region)
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def ssim_map(pred, gt) -> np.ndarray:
    """Per-pixel SSIM averaged over channels; Gaussian 11x11 window, sigma 1.5, data range 1."""
    x = np.asarray(pred, np.float64)
    y = np.asarray(gt, np.float64)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    truncate = ((SSIM_WIN - 1) / 2) / SSIM_SIGMA

    def blur(a):
        return ndimage.gaussian_filter(a, sigma=(SSIM_SIGMA, SSIM_SIGMA, 0), truncate=truncate, mode="reflect")

    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    vxy = blur(x * y) - ux * uy
    c1, c2 = K1**2, K2**2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    return s.mean(axis=-1)


def ssim(pred, gt, mask=None, region: str = "All", resolution: int | None = EVAL_RESOLUTION) -> float:
    """Mean SSIM over region pixels whose window lies inside the image.

    If the region has no such pixel, all region pixels are used (windows are
    reflected at the border).
    """
    pred, gt, mask = _prepare(pred, gt, mask, resolution)
    sel = region_mask(mask, region)
    smap = ssim_map(pred, gt)
    pad = (SSIM_WIN - 1) // 2
    inner = np.zeros_like(sel)
    inner[pad:-pad or None, pad:-pad or None] = True
    valid = sel & inner
    return _region_mean(smap, valid if valid.any() else sel)


class MaskScores(NamedTuple):
    ber: float
    per: float
    dropped: str | None = None  # "positive" / "negative" when that class is absent from gt


def ber_per(pred_mask, gt_mask) -> MaskScores:
    """Balanced error rate and pixel error rate, both in percent."""
    p = np.asarray(pred_mask) > 0.5
    g = np.asarray(gt_mask) > 0.5
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.sum(p & g))
    tn = int(np.sum(~p & ~g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    per = 100.0 * (fp + fn) / g.size
    rates, dropped = [], None
    if tp + fn:
        rates.append(fn / (tp + fn))
    else:
        dropped = "positive"
    if tn + fp:
        rates.append(fp / (tn + fp))
    else:
        dropped = "negative"
    if dropped:
        warnings.warn(f"ground-truth mask has no {dropped} pixels; that class rate is dropped from BER", stacklevel=2)
    ber = 100.0 * sum(rates) / len(rates)
    return MaskScores(ber, per, dropped)


@dataclass
class RegionReport:
    rmse_S: float
    rmse_NS: float
    rmse_All: float
    psnr_S: float
    psnr_NS: float
    psnr_All: float
    ssim_S: float
    ssim_NS: float
    ssim_All: float

    def row(self) -> list[float]:
        return [getattr(self, c) for c in REPORT_COLUMNS]


def region_report(pred, gt, mask, resolution: int | None = EVAL_RESOLUTION) -> RegionReport:
    pred, gt, mask = _prepare(pred, gt, mask, resolution)
    vals = {}
    for r in REGIONS:
        vals[f"rmse_{r}"] = rmse_lab(pred, gt, mask, r, resolution=None)
        vals[f"psnr_{r}"] = psnr(pred, gt, mask, r, resolution=None)
        vals[f"ssim_{r}"] = ssim(pred, gt, mask, r, resolution=None)
    return RegionReport(**vals)


def aggregate(reports: list[RegionReport]) -> RegionReport:
    """Per-image scores averaged over images."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return RegionReport(*(math.fsum(col) / len(reports) for col in zip(*(r.row() for r in reports))))


def write_jsonl(path_or_file, named_reports) -> None:
    lines = [json.dumps({"id": name, **asdict(rep)}) for name, rep in named_reports]
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w") as fh:
            fh.write(text)


def write_table(path, named_reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *REPORT_COLUMNS])
        for name, rep in named_reports:
            w.writerow([name, *(f"{v:.6f}" for v in rep.row())])
