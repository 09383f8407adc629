"""Image and mask data model, colour conversion, synthetic shadow pairs and augmentation.

Images are ``H x W x 3`` float32 arrays in ``[0, 1]``; masks are ``H x W``
float32 arrays holding exactly 0 or 1 (1 marks shadow).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy import ndimage

__all__ = [
    "ShadowSample",
    "ShadowParams",
    "ImageDecodeError",
    "as_image",
    "as_mask",
    "load_image",
    "load_mask",
    "save_image",
    "save_mask",
    "rgb_to_lab",
    "lab_to_rgb",
    "synth_base",
    "synth_shadow",
    "synth_dataset",
    "flip",
    "augment",
    "Geometry",
    "random_geometry",
    "apply_geometry",
    "resize_image",
    "resize_mask",
    "save_dataset",
    "load_dataset",
    "match_stems",
]

PAPER_RESOLUTION = 256
DESK_RESOLUTION = 64
MASK_THRESHOLD = 0.5


class ImageDecodeError(ValueError):
    """Raised when a file cannot be decoded as the expected raster type."""


@dataclass(frozen=True)
class ShadowSample:
    shadow: np.ndarray
    shadow_free: np.ndarray
    mask: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.shadow.shape != self.shadow_free.shape:
            raise ValueError(
                f"shadow {self.shadow.shape} and shadow_free {self.shadow_free.shape} differ in shape"
            )
        if self.mask.shape != self.shadow.shape[:2]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.shadow.shape[:2]}")

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape


def as_image(arr) -> np.ndarray:
    """Validate and convert to a float32 ``H x W x 3`` array in [0, 1]."""
    img = np.asarray(arr, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {img.shape}")
    if img.shape[0] <= 0 or img.shape[1] <= 0:
        raise ValueError("image height and width must be positive")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"image values outside [0, 1]: [{img.min()}, {img.max()}]")
    return img


def as_mask(arr, like: np.ndarray | None = None) -> np.ndarray:
    m = np.asarray(arr, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"expected H x W mask, got shape {m.shape}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("mask values must be exactly 0 or 1")
    if like is not None and m.shape != like.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {like.shape[:2]}")
    return m


# ---------------------------------------------------------------- file IO

def _open(path) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        im = Image.open(path)
        im.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode raster {path}: {exc}") from exc
    return im


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB raster and scale it to [0, 1]."""
    im = _open(path)
    if im.mode != "RGB":
        raise ImageDecodeError(f"{path}: expected 8-bit RGB raster, got mode {im.mode!r}")
    return np.asarray(im, dtype=np.float32) / 255.0


def load_mask(path) -> np.ndarray:
    """Read an 8-bit single-channel mask (0 / 255) as a binary float mask."""
    im = _open(path)
    if im.mode not in ("L", "1"):
        raise ImageDecodeError(f"{path}: expected single-channel mask, got mode {im.mode!r}")
    return (np.asarray(im.convert("L"), dtype=np.float32) >= 128).astype(np.float32)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(img), mode="RGB").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > MASK_THRESHOLD).astype(np.uint8) * 255, mode="L").save(path)


# ---------------------------------------------------------------- colour

# sRGB primaries, D65 white
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_WHITE = _RGB2XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _lab_f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_finv(t):
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(img) -> np.ndarray:
    """sRGB in [0, 1] to CIE L*a*b* (D65), float64. L lies in [0, 100]."""
    rgb = np.asarray(img, dtype=np.float64)
    xyz = _srgb_to_linear(rgb) @ _RGB2XYZ.T / _WHITE
    fx, fy, fz = (_lab_f(xyz[..., k]) for k in range(3))
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_rgb(lab) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_lab_finv(fx), _lab_finv(fy), _lab_finv(fz)], axis=-1) * _WHITE
    return _linear_to_srgb(xyz @ _XYZ2RGB.T)


# ---------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class ShadowParams:
    """Shadow geometry and strength.

    ``attenuation`` is the multiplicative factor applied inside the shadow and
    must lie strictly in (0, 1). ``softness`` is the width in pixels of the
    inner penumbra ramp (0 gives a hard edge). ``ramp`` adds a linear spatial
    drift of the attenuation across the image.
    """

    shape: str = "random"  # ellipse | polygon | random
    attenuation: float = 0.5
    softness: float = 0.0
    ramp: float = 0.0
    min_area_frac: float = 0.02
    max_retries: int = 20

    def __post_init__(self):
        if not 0.0 < self.attenuation < 1.0:
            raise ValueError(f"attenuation must be in (0, 1), got {self.attenuation}")
        if self.shape not in ("ellipse", "polygon", "random"):
            raise ValueError(f"unknown shadow shape {self.shape!r}")
        if self.softness < 0:
            raise ValueError("softness must be non-negative")


def synth_base(size: int | tuple[int, int], seed) -> np.ndarray:
    """Random textured RGB scene: colour gradient, gratings and flat patches."""
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    c0, c1 = rng.uniform(0.35, 0.9, size=(2, 3))
    angle = rng.uniform(0, np.pi)
    u = np.cos(angle) * xx + np.sin(angle) * yy
    img = c0 + (c1 - c0) * (u / max(u.max(), 1e-9))[..., None]
    for _ in range(rng.integers(2, 5)):
        freq = rng.uniform(3, 14)
        th = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.12, size=3)
        wave = np.sin(2 * np.pi * freq * (np.cos(th) * xx + np.sin(th) * yy) + phase)
        img = img + amp * wave[..., None]
    for _ in range(rng.integers(1, 4)):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        ph, pw = rng.integers(h // 8 + 1, h // 3 + 2), rng.integers(w // 8 + 1, w // 3 + 2)
        img[y0 : y0 + ph, x0 : x0 + pw] = rng.uniform(0.3, 0.95, size=3)
    img = img + rng.normal(0, 0.01, size=img.shape)
    return np.clip(img, 0.05, 0.98).astype(np.float32)


def _rasterize(shape: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    if shape == "ellipse":
        ry, rx = rng.uniform(0.12, 0.35) * h, rng.uniform(0.12, 0.35) * w
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    else:
        n = int(rng.integers(3, 8))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = rng.uniform(0.12, 0.4, n) * min(h, w)
        pts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a, r in zip(angles, radii)]
        draw.polygon(pts, fill=255)
    return (np.asarray(canvas) > 127).astype(np.float32)


def synth_shadow(base, seed, params: ShadowParams | None = None, id: str = "") -> ShadowSample:
    """Cast a random multiplicative shadow onto ``base``.

    Deterministic given ``seed``. Pixels outside the returned mask are left
    untouched; inside, the image is scaled by the attenuation (optionally
    ramped towards 1 near the boundary when ``softness > 0``).
    """
    params = params or ShadowParams()
    base = as_image(base)
    h, w = base.shape[:2]
    rng = np.random.default_rng(seed)
    for _ in range(params.max_retries):
        shape = params.shape
        if shape == "random":
            shape = "ellipse" if rng.random() < 0.5 else "polygon"
        mask = _rasterize(shape, h, w, rng)
        if mask.sum() >= max(1.0, params.min_area_frac * h * w):
            break
    else:
        raise ValueError(f"could not draw a non-degenerate shadow after {params.max_retries} attempts")

    strength = mask.astype(np.float64)
    if params.softness > 0:
        depth = ndimage.distance_transform_edt(mask)
        strength = np.clip(depth / params.softness, 0.0, 1.0) * mask
    att = np.full((h, w), params.attenuation, dtype=np.float64)
    if params.ramp:
        yy, xx = np.mgrid[0:h, 0:w]
        th = rng.uniform(0, 2 * np.pi)
        u = (np.cos(th) * xx / max(w - 1, 1) + np.sin(th) * yy / max(h - 1, 1)) / np.sqrt(2)
        att = np.clip(att + params.ramp * u, 0.02, 0.99)
    factor = 1.0 - (1.0 - att) * strength
    shadow = (base.astype(np.float64) * factor[..., None]).astype(np.float32)
    shadow = np.where(mask[..., None] > 0, shadow, base)
    return ShadowSample(shadow=shadow, shadow_free=base.copy(), mask=mask, id=id)


def synth_dataset(
    n: int,
    size: int = DESK_RESOLUTION,
    seed: int = 0,
    attenuation: tuple[float, float] = (0.3, 0.7),
    softness: tuple[float, float] = (0.0, 3.0),
) -> list[ShadowSample]:
    """``n`` seeded synthetic triplets with per-sample attenuation and softness."""
    ss = np.random.SeedSequence(seed)
    out = []
    for k, child in enumerate(ss.spawn(n)):
        rng = np.random.default_rng(child)
        base = synth_base(size, rng.integers(2**32))
        params = ShadowParams(
            attenuation=float(rng.uniform(*attenuation)),
            softness=float(rng.uniform(*softness)),
        )
        out.append(synth_shadow(base, rng.integers(2**32), params, id=f"synth_{seed}_{k:05d}"))
    return out


# ---------------------------------------------------------------- geometry

def flip(sample: ShadowSample, axis: int) -> ShadowSample:
    """Mirror all three components; ``axis`` 0 flips rows, 1 flips columns."""
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    return dataclasses.replace(
        sample,
        shadow=np.flip(sample.shadow, axis).copy(),
        shadow_free=np.flip(sample.shadow_free, axis).copy(),
        mask=np.flip(sample.mask, axis).copy(),
    )


def _resize_chw(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    dtype = np.float64 if arr.dtype == np.float64 else np.float32
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=dtype))[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].numpy()


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if img.shape[:2] == tuple(size):
        return img
    out = _resize_chw(img.transpose(2, 0, 1), size).transpose(1, 2, 0)
    return np.clip(out, 0.0, 1.0)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if mask.shape == tuple(size):
        return mask
    soft = _resize_chw(mask[None], size)[0]
    return (soft >= MASK_THRESHOLD).astype(np.float32)


@dataclass(frozen=True)
class Geometry:
    """One draw of the augmentation transform: flips, then a square crop."""

    flip_cols: bool
    flip_rows: bool
    top: int
    left: int
    side: int


def random_geometry(
    h: int,
    w: int,
    rng: np.random.Generator,
    crop_size: int | None = None,
    min_crop_frac: float = 0.75,
    flips: bool = True,
) -> Geometry:
    if crop_size is not None and (crop_size > h or crop_size > w or crop_size <= 0):
        raise ValueError(f"crop size {crop_size} does not fit image of size {h}x{w}")
    flip_cols = bool(flips and rng.random() < 0.5)
    flip_rows = bool(flips and rng.random() < 0.5)
    side = crop_size
    if side is None:
        lo = max(1, int(np.ceil(min_crop_frac * min(h, w))))
        side = int(rng.integers(lo, min(h, w) + 1))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return Geometry(flip_cols, flip_rows, top, left, side)


def apply_geometry(arr: np.ndarray, g: Geometry, resolution: int, binary: bool = False) -> np.ndarray:
    """Apply ``g`` to an ``H x W`` or ``H x W x C`` array and resize to ``resolution``."""
    if g.flip_cols:
        arr = np.flip(arr, 1)
    if g.flip_rows:
        arr = np.flip(arr, 0)
    arr = np.ascontiguousarray(arr[g.top : g.top + g.side, g.left : g.left + g.side])
    size = (resolution, resolution)
    if binary:
        return resize_mask(arr, size)
    if arr.shape[:2] == size:
        return arr
    return _resize_chw(arr.transpose(2, 0, 1), size).transpose(1, 2, 0)


def augment(
    sample: ShadowSample,
    seed,
    resolution: int = DESK_RESOLUTION,
    crop_size: int | None = None,
    min_crop_frac: float = 0.75,
    flips: bool = True,
) -> ShadowSample:
    """Random flip and crop applied identically to the triplet, then resize.

    With ``crop_size=None`` a square crop with side drawn uniformly from
    ``[min_crop_frac, 1] * min(H, W)`` is taken. The mask is re-binarised
    after resizing.
    """
    h, w = sample.size
    g = random_geometry(h, w, np.random.default_rng(seed), crop_size, min_crop_frac, flips)
    return dataclasses.replace(
        sample,
        shadow=np.clip(apply_geometry(sample.shadow, g, resolution), 0.0, 1.0),
        shadow_free=np.clip(apply_geometry(sample.shadow_free, g, resolution), 0.0, 1.0),
        mask=apply_geometry(sample.mask, g, resolution, binary=True),
    )


# ---------------------------------------------------------------- datasets

SUBDIRS = ("shadow", "shadow_free", "mask")


def save_dataset(root, samples) -> None:
    root = Path(root)
    for s in samples:
        save_image(root / "shadow" / f"{s.id}.png", s.shadow)
        save_image(root / "shadow_free" / f"{s.id}.png", s.shadow_free)
        save_mask(root / "mask" / f"{s.id}.png", s.mask)


def match_stems(*dirs) -> tuple[list[str], dict[str, list[str]]]:
    """Stems present in every directory, and per-directory stems left unmatched."""
    stems = [{p.stem for p in Path(d).glob("*.png")} for d in dirs]
    common = set.intersection(*stems) if stems else set()
    unmatched = {str(d): sorted(s - common) for d, s in zip(dirs, stems) if s - common}
    return sorted(common), unmatched


def load_dataset(root) -> list[ShadowSample]:
    """Load ``<root>/{shadow,shadow_free,mask}/*.png`` triplets matched by stem."""
    root = Path(root)
    dirs = [root / d for d in SUBDIRS]
    for d in dirs:
        if not d.is_dir():
            raise FileNotFoundError(f"dataset directory missing: {d}")
    stems, unmatched = match_stems(*dirs)
    if unmatched:
        raise ValueError(f"unmatched files in dataset {root}: {unmatched}")
    if not stems:
        raise ValueError(f"dataset {root} is empty")
    return [
        ShadowSample(
            shadow=load_image(root / "shadow" / f"{s}.png"),
            shadow_free=load_image(root / "shadow_free" / f"{s}.png"),
            mask=load_mask(root / "mask" / f"{s}.png"),
            id=s,
        )
        for s in stems
    ]
