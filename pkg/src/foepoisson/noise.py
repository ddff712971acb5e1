"""Peak scaling, Poisson sampling, and 3x3 binning for low-count experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BIN_FACTOR = 3


@dataclass(frozen=True)
class NoiseSpec:
    """Degradation settings: target peak, RNG seed, zero handling, binning."""

    peak: float
    seed: int = 0
    zero_offset_c: float = 0.0
    bin_factor: int = 1

    def __post_init__(self):
        if not self.peak > 0:
            raise ValueError(f"peak must be positive, got {self.peak}")
        if self.zero_offset_c < 0:
            raise ValueError(f"zero_offset_c must be >= 0, got {self.zero_offset_c}")
        if self.bin_factor not in (1, BIN_FACTOR):
            raise ValueError(f"bin_factor must be 1 or {BIN_FACTOR}, got {self.bin_factor}")


def scale_to_peak(img: np.ndarray, peak: float) -> np.ndarray:
    """Rescale so the maximum pixel equals ``peak``."""
    img = np.asarray(img, dtype=np.float64)
    top = img.max()
    if not peak > 0:
        raise ValueError(f"peak must be positive, got {peak}")
    if not top > 0:
        raise ValueError("image needs at least one strictly positive pixel")
    return img * (peak / top)


def sample_poisson(img: np.ndarray, seed: int) -> np.ndarray:
    """Draw y_p ~ Poisson(x_p) independently per pixel, reproducibly for fixed seed.

    Zero intensity yields zero counts with certainty.  Uses a counter-based
    (Philox) bit stream so the draw order, and hence the image, never depends
    on thread count.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.min() < 0:
        raise ValueError("Poisson intensities must be nonnegative")
    rng = np.random.Generator(np.random.Philox(key=seed))
    return rng.poisson(img).astype(np.float64)


def bin3(img: np.ndarray, factor: int = BIN_FACTOR) -> np.ndarray:
    """Sum factor x factor blocks (ones-kernel binning, default 3x3).

    Binning boosts the expected peak by factor**2.  Dims not divisible by the
    factor are replicate-padded on the bottom/right edge first, so the output
    has ceil(dim/factor) blocks per axis.  factor 1 is the identity.
    """
    img = np.asarray(img, dtype=np.float64)
    if factor == 1:
        return img.copy()
    h, w = img.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    hb, wb = img.shape[0] // factor, img.shape[1] // factor
    return img.reshape(hb, factor, wb, factor).sum(axis=(1, 3))


def upsample_bilinear(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear upscaling with corner-aligned sampling (reproduces affine ramps)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    H, W = shape
    if H < h or W < w:
        raise ValueError(f"target {shape} smaller than source {img.shape}")
    rows = np.linspace(0.0, h - 1.0, H) if H > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1.0, W) if W > 1 else np.zeros(1)
    i0 = np.minimum(rows.astype(np.int64), h - 2) if h > 1 else np.zeros(H, dtype=np.int64)
    j0 = np.minimum(cols.astype(np.int64), w - 2) if w > 1 else np.zeros(W, dtype=np.int64)
    di = (rows - i0)[:, None] if h > 1 else np.zeros((H, 1))
    dj = (cols - j0)[None, :] if w > 1 else np.zeros((1, W))
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    tl = img[np.ix_(i0, j0)]
    tr = img[np.ix_(i0, j1)]
    bl = img[np.ix_(i1, j0)]
    br = img[np.ix_(i1, j1)]
    top = tl + (tr - tl) * dj
    bot = bl + (br - bl) * dj
    return top + (bot - top) * di


def unbin_bilinear(img: np.ndarray, target_shape: tuple[int, int],
                   factor: int = BIN_FACTOR) -> np.ndarray:
    """Undo bin3 on a recovered intensity image: divide by factor**2, upscale, crop.

    ``target_shape`` is the pre-binning image shape; replicate padding applied
    by bin3 for awkward dims is removed by the final crop.  factor 1 with a
    matching shape is the identity.
    """
    img = np.asarray(img, dtype=np.float64)
    H, W = target_shape
    if factor == 1 and img.shape == (H, W):
        return img.copy()
    hp = -(-H // factor) * factor
    wp = -(-W // factor) * factor
    up = upsample_bilinear(img / float(factor**2), (hp, wp))
    return up[:H, :W]
