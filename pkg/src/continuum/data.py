"""Synthetic blob segmentation data, PNG ingestion and noise injection."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

SUPERSAMPLE = 4


@dataclass(eq=False)
class SegSample:
    image: np.ndarray  # [C,H,W] in [0, 1]
    mask: np.ndarray   # [1,H,W] in {0, 1}

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValueError(f"need image [C,H,W] and mask [1,H,W], got {self.image.shape}, {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValueError(f"image and mask spatial shapes differ: {self.image.shape} vs {self.mask.shape}")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be strictly binary")


def stack(samples: Sequence[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``images[N,C,H,W]`` and ``masks[N,1,H,W]``."""
    if not samples:
        raise ValueError("no samples to stack")
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def _ellipse_inside(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    w = (-s * dx + c * dy) / ry
    return u * u + w * w <= 1.0


def synth_blobs(n: int, size: int = 64, blob_count_range: tuple[int, int] = (1, 3),
                seed: int = 0) -> list[SegSample]:
    """Bright anti-aliased ellipses on a smooth textured background.

    The mask marks pixels whose centre lies inside any ellipse; image
    intensities blend foreground and background by sub-pixel coverage.
    """
    if size <= 0 or size % 16:
        raise ValueError(f"size must be a positive multiple of 16, got {size}")
    lo, hi = blob_count_range
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid blob_count_range {blob_count_range}")
    rng = np.random.default_rng(seed)
    centres = np.arange(size) + 0.5
    sub = (np.arange(size * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(centres, centres, indexing="ij")
    syy, sxx = np.meshgrid(sub, sub, indexing="ij")

    samples = []
    for _ in range(n):
        texture = gaussian_filter(rng.standard_normal((size, size)), sigma=2.0, mode="wrap")
        texture /= np.abs(texture).max() + 1e-12
        background = 0.25 + 0.08 * texture
        mask = np.zeros((size, size), dtype=bool)
        image = background.copy()
        for _ in range(int(rng.integers(lo, hi + 1))):
            ry, rx = rng.uniform(size / 14, size / 5, size=2)
            cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
            theta = rng.uniform(0, np.pi)
            level = rng.uniform(0.7, 0.9)
            inside = _ellipse_inside(syy, sxx, cy, cx, ry, rx, theta)
            frac = inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
            image = image * (1.0 - frac) + level * frac
            mask |= _ellipse_inside(yy, xx, cy, cx, ry, rx, theta)
        samples.append(SegSample(np.clip(image, 0.0, 1.0)[None], mask[None].astype(np.float64)))
    return samples


def add_gaussian_noise(image: np.ndarray, sigma: float, seed: int = 0, clamp: bool = True) -> np.ndarray:
    """Add zero-mean Gaussian noise of standard deviation ``sigma``."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    noisy = image + np.random.default_rng(seed).normal(0.0, sigma, size=image.shape)
    return np.clip(noisy, 0.0, 1.0) if clamp else noisy


def noisy_copy(samples: Sequence[SegSample], sigma: float, seed: int = 0) -> list[SegSample]:
    return [SegSample(add_gaussian_noise(s.image, sigma, seed=seed + i), s.mask) for i, s in enumerate(samples)]


def split(samples: Sequence[SegSample], val_fraction: float = 0.2,
          seed: int = 0) -> tuple[list[SegSample], list[SegSample]]:
    """Seeded shuffle, then the last ``val_fraction`` becomes the held-out split."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    cut = len(samples) - n_val
    return [samples[i] for i in order[:cut]], [samples[i] for i in order[cut:]]


# PNG I/O -----------------------------------------------------------------

def _to_uint8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_sample_png(sample: SegSample, image_path: str | Path, mask_path: str | Path) -> None:
    img = sample.image
    arr = _to_uint8(img[0]) if img.shape[0] == 1 else _to_uint8(img[:3].transpose(1, 2, 0))
    Image.fromarray(arr).save(image_path, format="PNG")
    Image.fromarray(_to_uint8(sample.mask[0])).save(mask_path, format="PNG")


def _read_png(path: Path, size: int, grayscale: bool) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ValueError(f"{path}: not a PNG file")
        if im.mode not in ("L", "LA", "RGB", "RGBA", "P"):
            raise ValueError(f"{path}: only 8-bit PNG is supported, got mode {im.mode}")
        im = im.convert("L" if grayscale or im.mode in ("L", "LA") else "RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64)


def load_image_dir(images_path: str | Path, masks_path: str | Path, size: int) -> list[SegSample]:
    """Pair images and masks by file name; images scaled to [0, 1], masks thresholded at 127."""
    images_path, masks_path = Path(images_path), Path(masks_path)
    images = {p.name: p for p in sorted(images_path.iterdir()) if p.is_file()}
    masks = {p.name: p for p in sorted(masks_path.iterdir()) if p.is_file()}
    for name in sorted(set(images) ^ set(masks)):
        where = images_path if name in images else masks_path
        raise ValueError(f"unpaired file {where / name}")
    samples = []
    for name in sorted(images):
        if Path(name).suffix.lower() != ".png":
            raise ValueError(f"{images[name]}: only PNG files are supported")
        img = _read_png(images[name], size, grayscale=False) / 255.0
        img = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)
        mask = (_read_png(masks[name], size, grayscale=True) > 127).astype(np.float64)[None]
        samples.append(SegSample(img, mask))
    return samples
