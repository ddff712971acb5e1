"""Loss-specific bilevel training of FoE filter banks.

Per sample, the lower level denoises with the current model; the loss of the
result w.r.t. the clean image is then differentiated through the minimizer by
implicit differentiation,

    dL/dtheta = -(d2 E / dw dtheta)^T  H^{-1}  dL/dw,     H = d2 E / dw2,

with the Hessian applied matrix-free and inverted by conjugate gradient.  An
L-BFGS driver with Armijo backtracking moves the filter coefficients and log
weights.  Training operates on log weights so the expert weights stay
positive; saved models carry the exponentiated values.

Two lower-level objectives are supported:
  original_domain : E(x) = FoE(x) + lam <x - f log x, 1>, loss 1/2 |x - g|^2
  anscombe_domain : E(u) = FoE(u) + 1/2 |u - v|^2, loss 1/2 |I_C(u) - g|^2
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .anscombe import (
    ANSCOMBE_ZERO,
    anscombe_forward,
    anscombe_inverse_derivative,
    anscombe_inverse_exact_unbiased,
)
from .image import convolve_adjoint, convolve_same
from .prior import FoEModel, foe_energy, foe_gradient, potential
from .solver import NumericalFailure, SolverConfig, ipiano_minimize, prox_idiv, prox_quadratic

OBJECTIVES = ("original_domain", "anscombe_domain")

_OBJECTIVE_TAG = {"original_domain": "original", "anscombe_domain": "anscombe"}


class LowerSolveFailure(RuntimeError):
    """Lower-level solve did not reach the required stationarity."""


class TrainingFailure(RuntimeError):
    """No sample produced a usable gradient."""


@dataclass(frozen=True)
class TrainingSample:
    """One clean/noisy pair; the stabilized noisy image is cached.

    clean : peak-scaled ground truth g
    noisy : integer-valued Poisson observation f
    transformed : anscombe_forward(noisy), kept consistent by construction
    """

    clean: np.ndarray
    noisy: np.ndarray
    transformed: np.ndarray

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape or self.clean.shape != self.transformed.shape:
            raise ValueError("sample images must share one shape")
        if not np.array_equal(self.noisy, np.round(self.noisy)) or self.noisy.min() < 0:
            raise ValueError("noisy image must hold nonnegative integer counts")
        if not np.allclose(self.transformed, anscombe_forward(self.noisy), atol=1e-12):
            raise ValueError("cached transform inconsistent with noisy image")

    @classmethod
    def create(cls, clean: np.ndarray, noisy: np.ndarray) -> "TrainingSample":
        return cls(clean=np.asarray(clean, dtype=np.float64),
                   noisy=np.asarray(noisy, dtype=np.float64),
                   transformed=anscombe_forward(noisy))


@dataclass
class TrainConfig:
    """Knobs for the bilevel driver; defaults follow the published recipe."""

    objective: str = "anscombe_domain"
    lbfgs_memory: int = 10
    max_outer_iters: int = 500
    rel_loss_tol: float = 1e-5
    lower_solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(max_iters=400, rel_tol=1e-8))
    hessian_cg_tol: float = 1e-9
    hessian_cg_max_iters: int = 600
    data_weight: float = 1.0
    # Newton polish after the inertial solve; implicit gradients assume a
    # tightly stationary minimizer
    polish_grad_tol: float = 1e-9
    polish_max_steps: int = 15
    stationarity_tol: float = 1e-6
    armijo_c1: float = 1e-4
    checkpoint_every: int = 25

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.rel_loss_tol <= 0 or self.hessian_cg_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer_iters < 0:
            raise ValueError("max_outer_iters must be >= 0")


def _check_domain(model: FoEModel, objective: str) -> None:
    if model.domain_tag != _OBJECTIVE_TAG[objective]:
        raise ValueError(
            f"model domain_tag {model.domain_tag!r} inconsistent with objective {objective!r}")


def _data_image(sample: TrainingSample, objective: str) -> np.ndarray:
    return sample.noisy if objective == "original_domain" else sample.transformed


def _data_energy(w, sample, objective, lam):
    if objective == "anscombe_domain":
        return 0.5 * float(np.sum((w - sample.transformed) ** 2))
    f = sample.noisy
    logs = np.where(f > 0, np.log(np.maximum(w, 1e-300)), 0.0)
    return lam * float(np.sum(w - f * logs))


def _data_gradient(w, sample, objective, lam):
    if objective == "anscombe_domain":
        return w - sample.transformed
    ratio = np.where(sample.noisy > 0, sample.noisy / np.maximum(w, 1e-150), 0.0)
    return lam * (1.0 - ratio)


def total_gradient(w, model, sample, objective, lam=1.0):
    """Gradient of the full lower objective at w."""
    return foe_gradient(w, model) + _data_gradient(w, sample, objective, lam)


def _pinned_mask(w, g, sample, objective):
    """Pixels sitting on the x = 0 constraint with a gradient pushing into it.

    Only possible in the original domain where the observation is zero; such
    pixels are KKT-consistent at a constrained minimum and are excluded from
    stationarity checks and Newton/implicit systems.
    """
    if objective != "original_domain":
        return None
    return (sample.noisy == 0) & (w <= 1e-12) & (g > 0)


def stationarity_residual(w, model, sample, objective, lam=1.0) -> float:
    """Sup-norm of the lower gradient, with KKT-consistent zeros masked out."""
    g = total_gradient(w, model, sample, objective, lam)
    pinned = _pinned_mask(w, g, sample, objective)
    if pinned is not None:
        g = np.where(pinned, 0.0, g)
    return float(np.max(np.abs(g)))


def hessian_apply(w, model, objective, p, sample, lam=1.0):
    """H p with H = sum_i wgt_i K_i^T diag(rho''(K_i w)) K_i + d2D, matrix-free.

    d2D is the identity for the anscombe objective and diag(lam f / w^2) for
    the original one.
    """
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    for wgt, k in zip(model.weights, model.filters):
        curv = potential(convolve_same(w, k, model.boundary), 2)
        out += wgt * convolve_adjoint(curv * convolve_same(p, k, model.boundary), k, model.boundary)
    if objective == "anscombe_domain":
        out += p
    else:
        diag = np.where(sample.noisy > 0, lam * sample.noisy / np.maximum(w, 1e-150) ** 2, 0.0)
        out += diag * p
    return out


def _trace_estimate(matvec, shape) -> float:
    z = np.where(np.random.Generator(np.random.Philox(key=0xC0FFEE)).random(shape) < 0.5, -1.0, 1.0)
    return float(np.vdot(z, matvec(z)))


def solve_hessian_system(w, model, objective, rhs, sample, lam=1.0,
                         tol=1e-9, max_iters=600, free=None):
    """Conjugate gradient for H q = rhs; returns (q, info).

    Non-positive curvature along a search direction triggers a restart with
    H + eps I (eps from a stochastic trace estimate), escalating eps tenfold
    if it recurs.  info carries iteration count, residual history, and the
    regularization actually used.  ``free`` (boolean mask) restricts the
    system to unpinned pixels, acting as the identity elsewhere.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    raw = lambda p: hessian_apply(w, model, objective, p, sample, lam)
    if free is None:
        base = raw
    else:
        rhs = np.where(free, rhs, 0.0)
        base = lambda p: np.where(free, raw(np.where(free, p, 0.0)), p)
    rhs_norm = np.linalg.norm(rhs)
    info = {"iterations": 0, "residuals": [], "regularization": 0.0}
    if rhs_norm == 0:
        return np.zeros_like(rhs), info

    eps = 0.0
    eps_unit = 1e-6 * max(_trace_estimate(base, rhs.shape), 0.0) / rhs.size + 1e-300
    for _ in range(6):
        matvec = base if eps == 0.0 else (lambda p: base(p) + eps * p)
        q = np.zeros_like(rhs)
        r = rhs.copy()
        d = r.copy()
        rs = float(np.vdot(r, r))
        residuals = [np.sqrt(rs) / rhs_norm]
        broke = False
        for it in range(max_iters):
            hd = matvec(d)
            dhd = float(np.vdot(d, hd))
            if dhd <= 1e-14 * float(np.vdot(d, d)):
                broke = True
                break
            alpha = rs / dhd
            q += alpha * d
            r -= alpha * hd
            rs_new = float(np.vdot(r, r))
            residuals.append(np.sqrt(rs_new) / rhs_norm)
            if residuals[-1] <= tol:
                info.update(iterations=it + 1, residuals=residuals, regularization=eps)
                return q, info
            d = r + (rs_new / rs) * d
            rs = rs_new
        if not broke:
            # out of iterations; accept the best iterate
            info.update(iterations=max_iters, residuals=residuals, regularization=eps)
            return q, info
        eps = eps_unit if eps == 0.0 else eps * 10.0
        warnings.warn(f"non-positive curvature in Hessian solve; regularizing with eps={eps:.3e}")
    info.update(iterations=max_iters, residuals=residuals, regularization=eps)
    return q, info


def lower_solve(sample, model, objective, cfg: TrainConfig, warm_start=None):
    """Minimize the lower-level objective to tight stationarity.

    Inertial forward-backward first, then Newton steps (each one Hessian
    solve) until the gradient sup-norm drops to cfg.polish_grad_tol.  Raises
    LowerSolveFailure when stationarity_tol is still not met.
    """
    _check_domain(model, objective)
    lam = cfg.data_weight
    data = _data_image(sample, objective)
    u0 = data if warm_start is None else warm_start

    if objective == "anscombe_domain":
        prox = lambda ut, tau: prox_quadratic(ut, tau, data)
    else:
        prox = lambda ut, tau: prox_idiv(ut, tau * lam, data)

    try:
        w, _ = ipiano_minimize(
            lambda u: foe_gradient(u, model),
            lambda u: foe_energy(u, model),
            prox,
            lambda u: _data_energy(u, sample, objective, lam),
            u0, cfg.lower_solver)
    except NumericalFailure as err:
        raise LowerSolveFailure(f"inertial solve failed: {err}") from err

    # Newton polish: implicit differentiation needs near-exact stationarity
    res = stationarity_residual(w, model, sample, objective, lam)
    for _ in range(cfg.polish_max_steps):
        if res <= cfg.polish_grad_tol:
            break
        g = total_gradient(w, model, sample, objective, lam)
        pinned = _pinned_mask(w, g, sample, objective)
        if pinned is not None:
            g = np.where(pinned, 0.0, g)
        q, _ = solve_hessian_system(w, model, objective, g, sample, lam,
                                    tol=cfg.hessian_cg_tol, max_iters=cfg.hessian_cg_max_iters,
                                    free=None if pinned is None else ~pinned)
        step = 1.0
        improved = False
        for _ in range(12):
            w_try = w - step * q
            if objective == "original_domain":
                w_try = np.where(sample.noisy == 0, np.maximum(w_try, 0.0), w_try)
                if np.any(w_try[sample.noisy > 0] <= 0):
                    step *= 0.5
                    continue
            res_try = stationarity_residual(w_try, model, sample, objective, lam)
            if res_try < res:
                w, res = w_try, res_try
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    if res > cfg.stationarity_tol:
        raise LowerSolveFailure(f"lower solve stalled at gradient sup-norm {res:.3e}")
    return w


def sample_loss(w, sample, objective) -> float:
    """Upper-level loss of a lower-level minimizer."""
    if objective == "original_domain":
        return 0.5 * float(np.sum((w - sample.clean) ** 2))
    x = anscombe_inverse_exact_unbiased(w)
    return 0.5 * float(np.sum((x - sample.clean) ** 2))


def _loss_gradient_wrt_w(w, sample, objective):
    if objective == "original_domain":
        return w - sample.clean
    x = anscombe_inverse_exact_unbiased(w)
    deriv = np.where(w > ANSCOMBE_ZERO, anscombe_inverse_derivative(np.maximum(w, ANSCOMBE_ZERO)), 0.0)
    return deriv * (x - sample.clean)


def param_gradients(w_star, model, sample, objective, cfg: TrainConfig):
    """Implicit-differentiation gradients (dL/dbeta, dL/dlogweight).

    dL/dbeta_ij = -wgt_i ( <rho'(K_i w), B_j q> + <Gam_i (K_i q), B_j w> )
    dL/dlog w_i = -wgt_i <rho'(K_i w), K_i q>,     q = H^{-1} dL/dw.
    """
    _check_domain(model, objective)
    lam = cfg.data_weight
    res = stationarity_residual(w_star, model, sample, objective, lam)
    if res > 1e-4:
        raise ValueError(f"w_star is not stationary (gradient sup-norm {res:.3e})")

    g = total_gradient(w_star, model, sample, objective, lam)
    pinned = _pinned_mask(w_star, g, sample, objective)
    rhs = _loss_gradient_wrt_w(w_star, sample, objective)
    q, _ = solve_hessian_system(w_star, model, objective, rhs, sample, lam,
                                tol=cfg.hessian_cg_tol, max_iters=cfg.hessian_cg_max_iters,
                                free=None if pinned is None else ~pinned)

    boundary = model.boundary
    atoms = model.basis.atoms
    bq = np.stack([convolve_same(q, b, boundary) for b in atoms])
    bw = np.stack([convolve_same(w_star, b, boundary) for b in atoms])

    filters = model.filters
    rho1 = np.empty((model.n_filters,) + w_star.shape)
    gkq = np.empty_like(rho1)
    kq_dot_rho1 = np.empty(model.n_filters)
    for i, k in enumerate(filters):
        r = convolve_same(w_star, k, boundary)
        kq = convolve_same(q, k, boundary)
        rho1[i] = potential(r, 1)
        gkq[i] = potential(r, 2) * kq
        kq_dot_rho1[i] = float(np.vdot(rho1[i], kq))

    t1 = np.einsum("ihw,jhw->ij", rho1, bq)
    t2 = np.einsum("ihw,jhw->ij", gkq, bw)
    d_beta = -model.weights[:, None] * (t1 + t2)
    d_logw = -model.weights * kq_dot_rho1
    return d_beta, d_logw


def initial_model(basis, n_filters, domain_tag, boundary="symmetric",
                  filter_norm=0.1, weight=1.0) -> FoEModel:
    """Standard initializer: the first basis atoms scaled to a common norm,
    every expert weight equal."""
    if n_filters > basis.n_atoms:
        raise ValueError(f"cannot draw {n_filters} filters from {basis.n_atoms} atoms")
    betas = np.zeros((n_filters, basis.n_atoms))
    betas[np.arange(n_filters), np.arange(n_filters)] = filter_norm
    return FoEModel(basis=basis, betas=betas, weights=np.full(n_filters, float(weight)),
                    domain_tag=domain_tag, boundary=boundary)


@dataclass
class TrainResult:
    model: FoEModel
    loss_history: list
    stop_reason: str
    skipped_samples: int = 0


def _model_from_theta(theta, template: FoEModel) -> FoEModel:
    nf, nb = template.betas.shape
    betas = theta[: nf * nb].reshape(nf, nb)
    weights = np.exp(theta[nf * nb:])
    return FoEModel(basis=template.basis, betas=betas, weights=weights,
                    domain_tag=template.domain_tag, boundary=template.boundary)


def _total_loss_and_grad(theta, template, samples, cfg, warm_in, strict):
    """Summed loss/gradient; returns fresh warm starts keyed by sample index.

    strict=False (first evaluation): failing samples are dropped with a
    warning.  strict=True (line-search probes): any failure aborts the trial,
    because a loss summed over fewer samples is not comparable.
    """
    model = _model_from_theta(theta, template)
    nf, nb = template.betas.shape
    loss = 0.0
    grad = np.zeros_like(theta)
    warm_out = {}
    for idx, sample in samples:
        try:
            w = lower_solve(sample, model, cfg.objective, cfg, warm_start=warm_in.get(idx))
        except LowerSolveFailure as err:
            if strict:
                raise TrainingFailure(f"sample {idx} unusable at trial point: {err}") from err
            warnings.warn(f"sample {idx} dropped from training: {err}")
            continue
        warm_out[idx] = w
        loss += sample_loss(w, sample, cfg.objective)
        d_beta, d_logw = param_gradients(w, model, sample, cfg.objective, cfg)
        grad[: nf * nb] += d_beta.ravel()
        grad[nf * nb:] += d_logw
    if not warm_out:
        raise TrainingFailure("every sample was skipped; no gradient available")
    return loss, grad, warm_out


def _save_checkpoint(path, theta, grad, loss_history, s_list, y_list, warm, template):
    """Full optimizer state; loading it resumes bit-exactly (gradient included,
    so nothing is recomputed at the restored point)."""
    arrays = {f"warm_{k}": v for k, v in warm.items()}
    np.savez(
        path,
        theta=theta,
        grad=grad,
        loss_history=np.asarray(loss_history),
        s_stack=np.stack(s_list) if s_list else np.zeros((0, theta.size)),
        y_stack=np.stack(y_list) if y_list else np.zeros((0, theta.size)),
        n_filters=template.betas.shape[0],
        basis_name=np.asarray(template.basis.name),
        domain_tag=np.asarray(template.domain_tag),
        boundary=np.asarray(template.boundary),
        **arrays,
    )


def load_checkpoint(path) -> dict:
    """Restore the optimizer state written by a training checkpoint."""
    with np.load(path, allow_pickle=False) as blob:
        state = {
            "theta": blob["theta"].copy(),
            "grad": blob["grad"].copy(),
            "loss_history": [float(v) for v in blob["loss_history"]],
            "s_list": [row.copy() for row in blob["s_stack"]],
            "y_list": [row.copy() for row in blob["y_stack"]],
            "warm": {int(name.split("_", 1)[1]): blob[name].copy()
                     for name in blob.files if name.startswith("warm_")},
            "n_filters": int(blob["n_filters"]),
            "basis_name": str(blob["basis_name"]),
            "domain_tag": str(blob["domain_tag"]),
            "boundary": str(blob["boundary"]),
        }
    return state


def train(samples, init_model: FoEModel, cfg: TrainConfig,
          checkpoint_dir=None, callback=None, resume_from=None) -> TrainResult:
    """L-BFGS over (beta, log weights) with implicit gradients.

    Stops on relative loss change below cfg.rel_loss_tol, the outer iteration
    cap, or a failed Armijo line search.  cfg.max_outer_iters = 0 returns the
    initial model unchanged.  callback(iteration, loss, model) is invoked
    after every accepted step; a truthy return stops training after writing a
    final checkpoint.  resume_from restores a checkpoint and continues
    bit-exactly (the stored gradient is reused, nothing recomputed).
    """
    if not samples:
        raise ValueError("need at least one training sample")
    _check_domain(init_model, cfg.objective)
    if cfg.max_outer_iters == 0:
        return TrainResult(model=init_model, loss_history=[], stop_reason="no iterations requested")

    template = init_model
    indexed = list(enumerate(samples))

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if (state["basis_name"] != template.basis.name
                or state["n_filters"] != template.betas.shape[0]
                or state["domain_tag"] != template.domain_tag):
            raise TrainingFailure("checkpoint does not match the model template")
        theta = state["theta"]
        grad = state["grad"]
        s_list = state["s_list"]
        y_list = state["y_list"]
        warm = state["warm"]
        loss_history = state["loss_history"]
        loss = loss_history[-1]
        skipped = len(samples) - len(warm)
        indexed = [(i, s) for i, s in indexed if i in warm]
        start_iter = len(loss_history) - 1
    else:
        theta = np.concatenate([init_model.betas.ravel(), np.log(init_model.weights)])
        s_list = []
        y_list = []
        # Samples that fail at the initial point are excluded for the whole
        # run so every later loss is a sum over one fixed sample set.
        loss, grad, warm = _total_loss_and_grad(theta, template, indexed, cfg, {},
                                                strict=False)
        skipped = len(samples) - len(warm)
        indexed = [(i, s) for i, s in indexed if i in warm]
        loss_history = [loss]
        start_iter = 0
    stop_reason = "iteration cap reached"

    for outer in range(start_iter, cfg.max_outer_iters):
        # two-loop recursion
        d = -grad.copy()
        alphas = []
        for s, y in zip(reversed(s_list), reversed(y_list)):
            a = float(np.dot(s, d)) / float(np.dot(s, y))
            alphas.append(a)
            d -= a * y
        if s_list:
            d *= float(np.dot(s_list[-1], y_list[-1])) / float(np.dot(y_list[-1], y_list[-1]))
        for (s, y), a in zip(zip(s_list, y_list), reversed(alphas)):
            b = float(np.dot(y, d)) / float(np.dot(s, y))
            d += (a - b) * s

        slope = float(np.dot(grad, d))
        if slope >= 0:
            d = -grad
            slope = -float(np.dot(grad, grad))

        step = 1.0
        accepted = False
        while step >= 2.0**-25:
            theta_try = theta + step * d
            try:
                loss_try, grad_try, warm_try = _total_loss_and_grad(
                    theta_try, template, indexed, cfg, warm, strict=True)
            except TrainingFailure:
                step *= 0.5
                continue
            if loss_try <= loss + cfg.armijo_c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            stop_reason = "line search found no feasible step"
            break

        s_vec = theta_try - theta
        y_vec = grad_try - grad
        if float(np.dot(s_vec, y_vec)) > 1e-10 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            s_list.append(s_vec)
            y_list.append(y_vec)
            if len(s_list) > cfg.lbfgs_memory:
                s_list.pop(0)
                y_list.pop(0)

        rel_change = abs(loss - loss_try) / max(abs(loss), 1e-300)
        theta, grad, warm = theta_try, grad_try, warm_try
        loss = loss_try
        loss_history.append(loss)
        stop_requested = (callback is not None
                          and callback(outer, loss, _model_from_theta(theta, template)))
        if checkpoint_dir is not None and ((outer + 1) % cfg.checkpoint_every == 0
                                           or stop_requested):
            _save_checkpoint(f"{checkpoint_dir}/checkpoint_{outer + 1:04d}.npz",
                             theta, grad, loss_history, s_list, y_list, warm, template)
        if stop_requested:
            stop_reason = "callback requested stop"
            break
        if rel_change < cfg.rel_loss_tol:
            stop_reason = "relative loss change below tolerance"
            break

    return TrainResult(model=_model_from_theta(theta, template),
                       loss_history=loss_history, stop_reason=stop_reason,
                       skipped_samples=skipped)
