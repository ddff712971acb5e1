"""PSNR and mean SSIM scoring.

Scoring convention used everywhere in the benchmarks: the clean image is
peak-scaled, both images are mapped to [0, 255] by multiplying with
255/peak, and data_range is 255.  The convention is stated here because
published tables rarely spell it out and the numbers depend on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(x_hat: np.ndarray, g: np.ndarray, data_range: float) -> float:
    """10 log10(data_range^2 / MSE); +inf when the images coincide."""
    x_hat, g = _check_pair(x_hat, g)
    if not data_range > 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((x_hat - g) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(data_range**2 / mse))


def _gaussian_window() -> np.ndarray:
    d = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2
    g = np.exp(-0.5 * (d / SSIM_SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g)


_WINDOW = _gaussian_window()


def mssim(x_hat: np.ndarray, g: np.ndarray, data_range: float) -> float:
    """Mean structural similarity, 11x11 Gaussian window, sigma 1.5.

    Local statistics are taken with valid-mode windows only, which is the
    same as computing the full map and cropping the half-window border, so
    boundary handling never enters.  Identical images score exactly 1.
    """
    x, y = _check_pair(x_hat, g)
    if not data_range > 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side, got {x.shape}")
    w = _WINDOW
    ux = convolve2d(x, w, mode="valid")
    uy = convolve2d(y, w, mode="valid")
    vx = convolve2d(x * x, w, mode="valid") - ux * ux
    vy = convolve2d(y * y, w, mode="valid") - uy * uy
    vxy = convolve2d(x * y, w, mode="valid") - ux * uy
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    return float(s.mean())


@dataclass(frozen=True)
class ScoreReport:
    """Quality of one denoised image against its ground truth."""

    psnr_db: float
    mssim: float
    image_id: str
    method_id: str
    peak: float

    def __post_init__(self):
        if not (-1e-12 <= self.mssim <= 1.0 + 1e-12):
            raise ValueError(f"mssim out of range: {self.mssim}")
        if not (np.isfinite(self.psnr_db) or self.psnr_db == float("inf")):
            raise ValueError(f"psnr must be finite or +inf, got {self.psnr_db}")


def score_denoised(x_hat: np.ndarray, g: np.ndarray, peak: float,
                   image_id: str = "", method_id: str = "") -> ScoreReport:
    """Apply the [0,255] scoring convention and produce a report."""
    scale = 255.0 / peak
    return ScoreReport(
        psnr_db=psnr(x_hat * scale, g * scale, 255.0),
        mssim=mssim(x_hat * scale, g * scale, 255.0),
        image_id=image_id,
        method_id=method_id,
        peak=peak,
    )
