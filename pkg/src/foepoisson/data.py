"""Bundled grayscale test images.

Evaluation images are standardized to 256x256 in [0, 255] so benchmark
runtimes and scores are comparable across the set.  Validation images feed
regularization-weight calibration; the training list provides textured
material for patch sampling.  Everything derives deterministically from
scikit-image sample data, so no image files ship with the package.
"""

import cv2
import numpy as np
from skimage import data as _skdata

EVAL_SIZE = 256

# (roster name, scikit-image source); order matches the benchmark columns
_EVAL_SOURCES = (
    ("boat", "rocket"),
    ("cameraman", "camera"),
    ("fluocells", "cell"),
    ("house", "moon"),
    ("lena", "astronaut"),
    ("bridge", "grass"),
    ("pepper", "coffee"),
    ("man", "chelsea"),
)
EVAL_IMAGE_NAMES = tuple(name for name, _ in _EVAL_SOURCES)

_VALIDATION_SOURCES = (("coins", "coins"), ("page", "page"), ("clock", "clock"))

_TRAINING_SOURCES = (
    ("retina", "retina"),
    ("tissue", "immunohistochemistry"),
    ("starfield", "hubble_deep_field"),
    ("gravel", "gravel"),
    ("brick", "brick"),
    ("text", "text"),
    ("vessels", "microaneurysms"),
    ("clockface", "clock"),
)


def to_grayscale(img):
    """Collapse RGB to luminance; return float64 in [0, 255]."""
    img = np.asarray(img)
    if img.ndim == 3:
        gray = img[..., 0] * 0.2125 + img[..., 1] * 0.7154 + img[..., 2] * 0.0721
    elif img.ndim == 2:
        gray = img.astype(np.float64)
    else:
        raise ValueError("expected a 2d or 3d array")
    gray = np.asarray(gray, dtype=np.float64)
    if img.dtype == np.uint16:
        gray /= 257.0
    return gray


def center_square(img, size=EVAL_SIZE):
    """Center-crop to the largest square, then resize with area averaging."""
    h, w = img.shape
    side = min(h, w)
    r0 = (h - side) // 2
    c0 = (w - side) // 2
    crop = np.ascontiguousarray(img[r0:r0 + side, c0:c0 + side])
    if side == size:
        return crop
    return cv2.resize(crop, (size, size), interpolation=cv2.INTER_AREA)


def _fetch(source):
    return to_grayscale(getattr(_skdata, source)())


def load_eval_image(name):
    """One of the eight 256x256 evaluation images, float64 in [0, 255]."""
    for roster, source in _EVAL_SOURCES:
        if roster == name:
            return center_square(_fetch(source))
    raise KeyError(f"unknown evaluation image {name!r}; choices: {EVAL_IMAGE_NAMES}")


def load_eval_images():
    """All evaluation images in benchmark column order."""
    return [(name, load_eval_image(name)) for name in EVAL_IMAGE_NAMES]


def load_validation_images():
    """Held-out 256x256 images for regularization-weight calibration."""
    return [(name, center_square(_fetch(src))) for name, src in _VALIDATION_SOURCES]


def load_training_images():
    """Textured images at native size, for patch extraction."""
    return [(name, _fetch(src)) for name, src in _TRAINING_SOURCES]


def extract_patches(images, n_patches, patch_size, seed):
    """Sample square patches uniformly across images, seeded and reproducible.

    Patches with near-zero dynamic range are rejected so every sample carries
    usable structure.
    """
    rng = np.random.default_rng(np.random.Philox(key=seed))
    pool = [img for _, img in images
            if img.shape[0] >= patch_size and img.shape[1] >= patch_size]
    if not pool:
        raise ValueError(f"no image can host a {patch_size}x{patch_size} patch")
    patches = []
    while len(patches) < n_patches:
        img = pool[int(rng.integers(len(pool)))]
        r = int(rng.integers(img.shape[0] - patch_size + 1))
        c = int(rng.integers(img.shape[1] - patch_size + 1))
        patch = img[r:r + patch_size, c:c + patch_size].copy()
        if patch.max() - patch.min() < 5.0:
            continue
        patches.append(patch)
    return patches
