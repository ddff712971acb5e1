"""Anscombe variance-stabilizing transform and its inverses.

Forward transform v = 2*sqrt(y + 3/8) maps Poisson counts to approximately
unit-variance Gaussian data.  Two inverses are provided: the plain algebraic
one and a closed-form approximation of the exact unbiased inverse, whose
derivative the transform-domain trainer needs.
"""

from __future__ import annotations

import numpy as np

# image of y = 0 under the forward transform; also the inversion clamp point
ANSCOMBE_ZERO = np.sqrt(1.5)

_S = np.sqrt(1.5)


def anscombe_forward(y: np.ndarray) -> np.ndarray:
    """v = 2*sqrt(y + 3/8), elementwise.  Rejects negative counts."""
    y = np.asarray(y, dtype=np.float64)
    if y.min() < 0:
        raise ValueError("counts must be nonnegative")
    return 2.0 * np.sqrt(y + 0.375)


def anscombe_inverse_algebraic(z: np.ndarray) -> np.ndarray:
    """Plain inverse (z/2)^2 - 3/8; exact round trip with the forward map."""
    z = np.asarray(z, dtype=np.float64)
    return (z / 2.0) ** 2 - 0.375


def anscombe_inverse_exact_unbiased(z: np.ndarray, diagnostics: dict | None = None) -> np.ndarray:
    """Closed-form approximation of the exact unbiased inverse.

    I_C(z) = z^2/4 + sqrt(3/2)/(4 z) - 11/(8 z^2) + 5 sqrt(3/2)/(8 z^3) - 1/8.

    Inputs below sqrt(3/2) (the image of zero counts; a denoiser can
    undershoot it) are clamped up to that value, where I_C vanishes, and
    negative outputs are clamped to zero.  Pass a dict as ``diagnostics`` to
    receive the number of pixels each clamp touched.
    """
    z = np.asarray(z, dtype=np.float64)
    low = z < ANSCOMBE_ZERO
    zc = np.where(low, ANSCOMBE_ZERO, z)
    x = zc**2 / 4.0 + _S / (4.0 * zc) - 11.0 / (8.0 * zc**2) + 5.0 * _S / (8.0 * zc**3) - 0.125
    neg = x < 0
    if diagnostics is not None:
        diagnostics["n_clamped_input"] = int(np.count_nonzero(low))
        diagnostics["n_clamped_output"] = int(np.count_nonzero(neg & ~low))
    return np.where(neg, 0.0, x)


def anscombe_inverse_derivative(z: np.ndarray) -> np.ndarray:
    """Derivative of the exact unbiased inverse, I_C'(z), for z > 0."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("derivative needs z > 0")
    return z / 2.0 - _S / (4.0 * z**2) + 11.0 / (4.0 * z**3) - 15.0 * _S / (8.0 * z**4)
