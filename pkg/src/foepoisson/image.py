"""2D convolution with explicit boundary handling, exact adjoints, and filter bases.

All operators act on 2D float64 arrays.  A convolution with boundary rule
``b`` is the linear map  C = V . P  where P pads by the filter radius using
rule ``b`` and V is the interior (valid) convolution.  The adjoint folds the
padded gradient back onto the source pixels, so <Cx, y> == <x, C^T y> holds
to machine precision for every kernel and boundary rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import cv2
import numpy as np

BOUNDARY_RULES = ("symmetric", "periodic")

_NP_PAD_MODE = {"symmetric": "symmetric", "periodic": "wrap"}


def _check_kernel(kernel: np.ndarray) -> int:
    kernel = np.asarray(kernel)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be square 2D, got shape {kernel.shape}")
    if kernel.shape[0] % 2 != 1:
        raise ValueError(f"kernel side must be odd, got {kernel.shape[0]}")
    return kernel.shape[0] // 2


def _check_boundary(boundary: str) -> None:
    if boundary not in BOUNDARY_RULES:
        raise ValueError(f"boundary must be one of {BOUNDARY_RULES}, got {boundary!r}")


def convolve_same(x: np.ndarray, kernel: np.ndarray, boundary: str = "symmetric") -> np.ndarray:
    """Convolve ``x`` with ``kernel`` (true convolution), output same shape as ``x``.

    Parameters
    ----------
    x : (H, W) array
    kernel : (m, m) array, m odd
    boundary : 'symmetric' (edge-inclusive mirror) or 'periodic'
    """
    r = _check_kernel(kernel)
    _check_boundary(boundary)
    x = np.ascontiguousarray(x, dtype=np.float64)
    # cv2.filter2D computes correlation, so flip the kernel to convolve
    kf = np.ascontiguousarray(kernel[::-1, ::-1], dtype=np.float64)
    if r == 0:
        return x * kf[0, 0]
    if boundary == "symmetric":
        return cv2.filter2D(x, -1, kf, borderType=cv2.BORDER_REFLECT)
    # filter2D does not support BORDER_WRAP; pad explicitly and crop
    xp = np.pad(x, r, mode="wrap")
    out = cv2.filter2D(xp, -1, kf, borderType=cv2.BORDER_CONSTANT)
    return out[r:-r, r:-r]


@lru_cache(maxsize=64)
def _pad_index_map(shape: tuple[int, int], r: int, boundary: str) -> np.ndarray:
    """Flat source index of every pixel of the padded image."""
    idx = np.arange(shape[0] * shape[1]).reshape(shape)
    return np.pad(idx, r, mode=_NP_PAD_MODE[boundary])


def convolve_adjoint(y: np.ndarray, kernel: np.ndarray, boundary: str = "symmetric") -> np.ndarray:
    """Exact adjoint of ``convolve_same`` with the same kernel and boundary rule."""
    r = _check_kernel(kernel)
    _check_boundary(boundary)
    y = np.ascontiguousarray(y, dtype=np.float64)
    k = np.ascontiguousarray(kernel, dtype=np.float64)
    if r == 0:
        return y * k[0, 0]
    # V^T y = full correlation of y with the unflipped kernel; realized as a
    # same-size filter2D pass over y zero-padded by the radius
    yp = np.pad(y, r)
    g = cv2.filter2D(yp, -1, k, borderType=cv2.BORDER_CONSTANT)
    # P^T: accumulate padded-pixel gradients onto their source pixels
    idx = _pad_index_map(y.shape, r, boundary)
    out = np.bincount(idx.ravel(), weights=g.ravel(), minlength=y.size)
    return out.reshape(y.shape)


@dataclass(frozen=True)
class FilterBasis:
    """Orthonormal zero-mean filter basis.

    atoms : (n_atoms, m, m) array, each atom unit Frobenius norm
    name : identifier stored in model files
    """

    atoms: np.ndarray
    name: str

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def size(self) -> int:
        return self.atoms.shape[1]

    def compose(self, beta: np.ndarray) -> np.ndarray:
        """Linear combination sum_j beta_j * atom_j -> (m, m) filter."""
        beta = np.asarray(beta, dtype=np.float64)
        if beta.shape != (self.n_atoms,):
            raise ValueError(f"beta must have shape ({self.n_atoms},), got {beta.shape}")
        return np.tensordot(beta, self.atoms, axes=1)

    def coefficients(self, kernel: np.ndarray) -> np.ndarray:
        """Project a filter onto the basis (exact for zero-mean filters)."""
        return np.tensordot(self.atoms, kernel, axes=2)


def dct_basis(m: int) -> FilterBasis:
    """Zero-mean DCT filter basis for m x m kernels.

    The 2D orthonormal DCT-II basis with the constant atom removed: m*m - 1
    atoms, each zero-mean, unit Frobenius norm, and mutually orthogonal.
    """
    if m < 2:
        raise ValueError("basis needs m >= 2")
    i = np.arange(m)
    d = np.cos(np.pi * (2 * i[None, :] + 1) * i[:, None] / (2 * m))
    d[0] *= np.sqrt(1.0 / m)
    d[1:] *= np.sqrt(2.0 / m)
    atoms = np.einsum("pi,qj->pqij", d, d).reshape(m * m, m, m)[1:]
    return FilterBasis(atoms=np.ascontiguousarray(atoms), name=f"dct{m}")


_BASIS_BUILDERS = {"dct": dct_basis}


def basis_by_name(name: str) -> FilterBasis:
    """Reconstruct a basis from its stored identifier, e.g. 'dct7'."""
    for prefix, builder in _BASIS_BUILDERS.items():
        if name.startswith(prefix) and name[len(prefix):].isdigit():
            return builder(int(name[len(prefix):]))
    raise ValueError(f"unknown filter basis {name!r}")
