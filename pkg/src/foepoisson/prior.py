"""Fields-of-experts prior: lorentzian potential, energy, gradient, curvature.

A model is a bank of zero-mean filters built from a shared basis, one positive
weight per filter, and a tag saying which domain (raw intensities or
variance-stabilized data) it was trained for.  The energy of an image u is

    E(u) = sum_i w_i sum_p rho((k_i * u)_p),    rho(z) = log(1 + z^2),

with the boundary rule recorded on the model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .image import FilterBasis, convolve_adjoint, convolve_same

DOMAIN_TAGS = ("original", "anscombe")


def potential(z: np.ndarray, order: int = 0) -> np.ndarray:
    """rho(z) = log(1 + z^2) or its first/second derivative.

    rho'(z) = 2z/(1+z^2), rho''(z) = 2(1-z^2)/(1+z^2)^2.
    """
    z = np.asarray(z, dtype=np.float64)
    if order == 0:
        return np.log1p(z**2)
    if order == 1:
        return 2.0 * z / (1.0 + z**2)
    if order == 2:
        return 2.0 * (1.0 - z**2) / (1.0 + z**2) ** 2
    raise ValueError(f"order must be 0, 1 or 2, got {order}")


@dataclass(frozen=True)
class FoEModel:
    """Filter bank prior.

    basis : shared filter basis
    betas : (n_filters, n_atoms) coefficients, filter i = basis.compose(betas[i])
    weights : (n_filters,) strictly positive expert weights
    domain_tag : 'original' (raw intensities) or 'anscombe' (stabilized data)
    boundary : convolution boundary rule, recorded so training and inference agree
    """

    basis: FilterBasis
    betas: np.ndarray
    weights: np.ndarray
    domain_tag: str
    boundary: str = "symmetric"

    def __post_init__(self):
        betas = np.atleast_2d(np.asarray(self.betas, dtype=np.float64))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "weights", weights)
        if betas.shape[1] != self.basis.n_atoms:
            raise ValueError(
                f"betas have {betas.shape[1]} coefficients, basis has {self.basis.n_atoms} atoms"
            )
        if weights.shape != (betas.shape[0],):
            raise ValueError(f"need one weight per filter, got {weights.shape} for {betas.shape[0]}")
        if not np.all(weights > 0):
            raise ValueError("expert weights must be strictly positive")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"domain_tag must be one of {DOMAIN_TAGS}, got {self.domain_tag!r}")

    @property
    def n_filters(self) -> int:
        return self.betas.shape[0]

    @property
    def filters(self) -> np.ndarray:
        """(n_filters, m, m) composed filter stack."""
        return np.tensordot(self.betas, self.basis.atoms, axes=1)

    def with_weights(self, weights: np.ndarray) -> "FoEModel":
        return replace(self, weights=np.asarray(weights, dtype=np.float64))

    def scaled(self, factor: float) -> "FoEModel":
        return self.with_weights(self.weights * factor)


def _check_dims(u: np.ndarray, model: FoEModel) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    m = model.basis.size
    if u.ndim != 2 or u.shape[0] < m or u.shape[1] < m:
        raise ValueError(f"image shape {u.shape} smaller than filter size {m}")
    return u


def foe_energy(u: np.ndarray, model: FoEModel) -> float:
    """sum_i w_i sum_p rho((k_i * u)_p)."""
    u = _check_dims(u, model)
    total = 0.0
    for w, k in zip(model.weights, model.filters):
        total += w * potential(convolve_same(u, k, model.boundary)).sum()
    return float(total)


def foe_gradient(u: np.ndarray, model: FoEModel) -> np.ndarray:
    """sum_i w_i K_i^T rho'(K_i u); exact adjoint of the energy's linearization."""
    u = _check_dims(u, model)
    grad = np.zeros_like(u)
    for w, k in zip(model.weights, model.filters):
        grad += w * convolve_adjoint(potential(convolve_same(u, k, model.boundary), 1), k, model.boundary)
    return grad


def foe_hessian_vec(u: np.ndarray, v: np.ndarray, model: FoEModel) -> np.ndarray:
    """Hessian of the energy at u applied to v: sum_i w_i K_i^T diag(rho''(K_i u)) K_i v."""
    u = _check_dims(u, model)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != u.shape:
        raise ValueError(f"direction shape {v.shape} != image shape {u.shape}")
    out = np.zeros_like(u)
    for w, k in zip(model.weights, model.filters):
        curv = potential(convolve_same(u, k, model.boundary), 2)
        out += w * convolve_adjoint(curv * convolve_same(v, k, model.boundary), k, model.boundary)
    return out


def lipschitz_bound(model: FoEModel) -> float:
    """Global bound on the gradient's Lipschitz constant.

    rho'' <= 2 and the operator norm of a padded convolution is at most the
    kernel's l1 norm, so L <= 2 sum_i w_i |k_i|_1^2.
    """
    norms1 = np.abs(model.filters).sum(axis=(1, 2))
    return float(2.0 * np.sum(model.weights * norms1**2))
