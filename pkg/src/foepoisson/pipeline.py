"""End-to-end denoisers built on the filter prior and the inertial solver.

Three variants: ``direct`` couples the prior with an I-divergence data term on
the raw counts; ``transform`` denoises the variance-stabilized image with a
peak-adaptive data term and inverts exactly; ``transform_binned`` wraps the
transform variant with ones-kernel binning for very low counts.  Branch
selection is a pure function of the (possibly binned) peak: quadratic iff
peak >= 5.
"""

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.ndimage import median_filter

from .anscombe import anscombe_forward, anscombe_inverse_exact_unbiased
from .noise import BIN_FACTOR, bin3, unbin_bilinear
from .prior import FoEModel, foe_energy, foe_gradient
from .solver import (SolverConfig, SolverTrace, ipiano_minimize, prox_idiv,
                     prox_quadratic)

VARIANTS = ("direct", "transform", "transform_binned")
QUADRATIC_PEAK_THRESHOLD = 5.0
AUTO_LAMBDA = "auto"
_TABLE_RESOURCE = "lambda_table.json"


@dataclass(frozen=True)
class DenoiseRequest:
    """One denoising job: noisy counts, peak, model, and variant selection.

    lam is a positive float or "auto" (resolved from the calibration table).
    zero_offset_c replaces zero counts before the direct solve; c = 0 keeps
    the known failure mode where zero pixels stay pinned at zero.
    """

    noisy: np.ndarray
    peak: float
    model: FoEModel
    variant: str
    lam: object = AUTO_LAMBDA
    zero_offset_c: float = 0.1
    bin_factor: int = BIN_FACTOR
    # override the peak-threshold branch rule ("quadratic" or "idiv");
    # useful for comparing both data terms at one peak
    force_branch: str | None = None

    def __post_init__(self):
        noisy = np.asarray(self.noisy, dtype=np.float64)
        if noisy.ndim != 2:
            raise ValueError("noisy image must be 2d")
        if np.any(noisy < 0) or not np.array_equal(noisy, np.rint(noisy)):
            raise ValueError("noisy image must hold non-negative integer counts")
        object.__setattr__(self, "noisy", noisy)
        if not self.peak > 0:
            raise ValueError(f"peak must be positive, got {self.peak}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lam != AUTO_LAMBDA and not float(self.lam) > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.zero_offset_c < 0:
            raise ValueError("zero_offset_c must be non-negative")
        if self.bin_factor < 1:
            raise ValueError("bin_factor must be >= 1")
        if self.force_branch not in (None, "quadratic", "idiv"):
            raise ValueError(f"force_branch must be quadratic or idiv, got {self.force_branch!r}")


@dataclass(frozen=True)
class DenoiseResult:
    """Denoised image plus what the dispatch decided along the way."""

    image: np.ndarray
    branch: str
    lam: float
    trace: SolverTrace
    peak_used: float
    transformed: np.ndarray | None = None


def solver_budget(peak: float, overrides: SolverConfig | None = None) -> SolverConfig:
    """Iteration budget by peak: harder low-count problems get more steps."""
    base = overrides or SolverConfig()
    iters = 150 if peak < QUADRATIC_PEAK_THRESHOLD else 60
    return replace(base, max_iters=iters)


def _load_table() -> dict:
    text = resources.files("foepoisson.assets").joinpath(_TABLE_RESOURCE).read_text()
    return json.loads(text)


_TABLE_CACHE: dict = {}


def _branch_key(peak: float, variant: str, force_branch: str | None = None) -> tuple[str, float]:
    """Map (peak, variant) to a table name and the peak that indexes it."""
    if variant == "direct":
        return "direct", peak
    if variant == "transform_binned":
        peak = peak * BIN_FACTOR**2
        variant = "transform"
    if variant != "transform":
        raise ValueError(f"unknown variant {variant!r}")
    if force_branch is not None:
        return f"transform_{force_branch}", peak
    if peak >= QUADRATIC_PEAK_THRESHOLD:
        return "transform_quadratic", peak
    return "transform_idiv", peak


def select_lambda(peak: float, variant: str, table: dict | None = None,
                  force_branch: str | None = None) -> float:
    """Calibrated data-term weight, log-linearly interpolated in peak.

    Peaks outside the calibrated range clamp to the nearest bucket.
    """
    if not peak > 0:
        raise ValueError("peak must be positive")
    if table is None:
        if "t" not in _TABLE_CACHE:
            _TABLE_CACHE["t"] = _load_table()
        table = _TABLE_CACHE["t"]
    name, p = _branch_key(peak, variant, force_branch)
    rows = sorted(table["tables"][name])
    peaks = np.array([r[0] for r in rows])
    lams = np.array([r[1] for r in rows])
    logl = np.interp(np.log(p), np.log(peaks), np.log(lams))
    return float(np.exp(logl))


def _resolve_lambda(req: DenoiseRequest, peak: float) -> float:
    if req.lam == AUTO_LAMBDA:
        return select_lambda(peak, "transform" if req.variant == "transform_binned"
                             else req.variant, force_branch=req.force_branch)
    return float(req.lam)


def _idiv_energy(u, obs, lam):
    """lam * sum(u - obs log u); the obs = 0 pixels contribute u alone."""
    pos = obs > 0
    val = float(np.sum(u))
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(pos & (u > 0), np.log(np.where(u > 0, u, 1.0)), 0.0)
    if np.any(pos & (u <= 0)):
        return np.inf
    return lam * (val - float(np.sum(obs[pos] * logs[pos])))


def denoise_direct(req: DenoiseRequest,
                   solver: SolverConfig | None = None) -> DenoiseResult:
    """Original-domain model: prior on the counts, I-divergence data term.

    Zero counts are replaced by zero_offset_c before the solve; with c = 0
    those pixels are fixed points of the proximal map and never move.
    """
    if req.variant != "direct":
        raise ValueError(f"variant {req.variant!r} routed to denoise_direct")
    if req.model.domain_tag != "original":
        raise ValueError(
            f"direct variant needs an original-domain model, got {req.model.domain_tag!r}")
    lam = _resolve_lambda(req, req.peak)
    obs = np.where(req.noisy == 0, req.zero_offset_c, req.noisy)
    cfg = solver_budget(req.peak, solver)
    u, trace = ipiano_minimize(
        grad_F=lambda u: foe_gradient(u, req.model),
        energy_F=lambda u: foe_energy(u, req.model),
        prox_G=lambda ut, t: prox_idiv(ut, t * lam, obs),
        energy_G=lambda u: _idiv_energy(u, obs, lam),
        u0=obs.copy(), cfg=cfg)
    return DenoiseResult(image=u, branch="direct_idiv", lam=lam,
                         trace=trace, peak_used=req.peak)


def denoise_transform(req: DenoiseRequest,
                      solver: SolverConfig | None = None) -> DenoiseResult:
    """Stabilize, denoise with a peak-adaptive data term, invert exactly.

    peak >= 5 pairs the prior with a quadratic fit to the stabilized image;
    below that the stabilized values keep enough skew that an I-divergence
    fit does better.
    """
    if req.variant not in ("transform", "transform_binned"):
        raise ValueError(f"variant {req.variant!r} routed to denoise_transform")
    if req.model.domain_tag != "anscombe":
        raise ValueError(
            f"transform variant needs a transform-domain model, got {req.model.domain_tag!r}")
    lam = _resolve_lambda(req, req.peak)
    v = anscombe_forward(req.noisy)
    cfg = solver_budget(req.peak, solver)
    if req.force_branch is not None:
        quadratic = req.force_branch == "quadratic"
    else:
        quadratic = req.peak >= QUADRATIC_PEAK_THRESHOLD
    if quadratic:
        branch = "transform_quadratic"
        prox = lambda ut, t: prox_quadratic(ut, t * lam, v)
        energy_G = lambda u: 0.5 * lam * float(np.sum((u - v)**2))
    else:
        branch = "transform_idiv"
        prox = lambda ut, t: prox_idiv(ut, t * lam, v)
        energy_G = lambda u: _idiv_energy(u, v, lam)
    u, trace = ipiano_minimize(
        grad_F=lambda u: foe_gradient(u, req.model),
        energy_F=lambda u: foe_energy(u, req.model),
        prox_G=prox, energy_G=energy_G, u0=v.copy(), cfg=cfg)
    x_hat = anscombe_inverse_exact_unbiased(u)
    return DenoiseResult(image=x_hat, branch=branch, lam=lam,
                         trace=trace, peak_used=req.peak, transformed=u)


def denoise_binned(req: DenoiseRequest,
                   solver: SolverConfig | None = None) -> DenoiseResult:
    """Bin counts, denoise the binned image, interpolate back to full size.

    The branch is decided by the binned peak, taken as factor**2 times the
    nominal peak (the expected count of a binned block).  bin_factor 1
    degenerates exactly to the transform variant.
    """
    if req.variant != "transform_binned":
        raise ValueError(f"variant {req.variant!r} routed to denoise_binned")
    factor = req.bin_factor
    peak_b = float(factor**2) * req.peak
    binned = bin3(req.noisy, factor)
    sub = DenoiseRequest(noisy=binned, peak=peak_b, model=req.model,
                         variant="transform", lam=req.lam,
                         zero_offset_c=req.zero_offset_c, bin_factor=1,
                         force_branch=req.force_branch)
    inner = denoise_transform(sub, solver)
    image = unbin_bilinear(inner.image, req.noisy.shape, factor)
    return DenoiseResult(image=image, branch=inner.branch, lam=inner.lam,
                         trace=inner.trace, peak_used=peak_b,
                         transformed=inner.transformed)


_DISPATCH = {"direct": denoise_direct, "transform": denoise_transform,
             "transform_binned": denoise_binned}


def denoise(req: DenoiseRequest, solver: SolverConfig | None = None) -> DenoiseResult:
    """Run the variant the request names."""
    return _DISPATCH[req.variant](req, solver)


def estimate_peak(noisy: np.ndarray) -> float:
    """Estimate the peak as the max of a 3x3-median-filtered image.

    The raw max is an outlier under shot noise; the median filter suppresses
    it.  An estimate only; prefer the true peak when it is known.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    return float(median_filter(noisy, size=3).max())
