"""Inertial forward-backward solver and the closed-form proximal maps.

The update is  u_{n+1} = prox_{tau G}( u_n - tau grad F(u_n) + gamma (u_n - u_{n-1}) )
with tau_n = 1.99 (1 - gamma) / L_n and L_n found by backtracking on the
descent inequality

    F(u_{n+1}) <= F(u_n) + <grad F(u_n), du> + (L_n / 2) |du|^2.

After an accepted step L is relaxed by a small factor so the step size can
grow again.  All constants live in SolverConfig; the defaults follow the
standard practice for this scheme and satisfy tau < 2 (1 - gamma) / L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# accepted-step slack tolerance: the inequality is checked up to rounding,
# scaled by the magnitudes entering the slack so it never becomes an
# artificial floor near convergence
_SLACK_RTOL = 1e-12


class NumericalFailure(RuntimeError):
    """Solver abort (non-finite energy or hopeless backtracking); carries the trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class SolverConfig:
    """Step-size and stopping constants for the inertial solver.

    gamma : inertial weight in [0, 1)
    lipschitz_init : L_{-1} > 0, first curvature guess
    backtrack_factor : eta > 1, L multiplier when the descent check fails
    relax_factor : L divisor after an accepted step
    max_iters : iteration budget (150 suits low peaks, 60 suffices at peak >= 5)
    rel_tol : stop when |u_{n+1} - u_n| / |u_n| drops below this
    """

    gamma: float = 0.8
    lipschitz_init: float = 1.0
    backtrack_factor: float = 1.2
    relax_factor: float = 1.05
    max_iters: int = 150
    rel_tol: float = 1e-6
    max_lipschitz: float = 1e15

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not self.lipschitz_init > 0:
            raise ValueError(f"lipschitz_init must be positive, got {self.lipschitz_init}")
        if not self.backtrack_factor > 1:
            raise ValueError(f"backtrack_factor must exceed 1, got {self.backtrack_factor}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    def step_size(self, lipschitz: float) -> float:
        return 1.99 * (1.0 - self.gamma) / lipschitz


@dataclass
class SolverTrace:
    """Per accepted iteration: energies, curvature estimate, step norm, slack."""

    iteration: list = field(default_factory=list)
    F: list = field(default_factory=list)
    G: list = field(default_factory=list)
    L: list = field(default_factory=list)
    step_norm: list = field(default_factory=list)
    # F(u_new) - quadratic upper model; <= slack_tol (rounding allowance) on
    # accepted steps, so tests can re-verify the descent inequality exactly
    descent_slack: list = field(default_factory=list)
    slack_tol: list = field(default_factory=list)

    def __len__(self):
        return len(self.iteration)

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,F,G,L,step_norm\n")
            for row in zip(self.iteration, self.F, self.G, self.L, self.step_norm):
                fh.write("%d,%.17g,%.17g,%.17g,%.17g\n" % row)


def prox_quadratic(u_tilde: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
    """argmin_u 1/2 |u - u_tilde|^2 + (t/2) |u - v|^2  =  (u_tilde + t v) / (1 + t)."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    u_tilde = np.asarray(u_tilde, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u_tilde.shape != v.shape:
        raise ValueError(f"shape mismatch {u_tilde.shape} vs {v.shape}")
    return (u_tilde + t * v) / (1.0 + t)


def prox_idiv(u_tilde: np.ndarray, t: float, obs: np.ndarray) -> np.ndarray:
    """argmin_u 1/2 |u - u_tilde|^2 + t (u - obs log u),  elementwise.

    Closed form ((u_tilde - t) + sqrt((u_tilde - t)^2 + 4 t obs)) / 2, evaluated
    in whichever of the two algebraically equal branches avoids cancellation.
    Output is >= 0, and > 0 wherever obs > 0 (for t > 0).  t = 0 returns
    u_tilde unchanged.
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    u_tilde = np.asarray(u_tilde, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if u_tilde.shape != obs.shape:
        raise ValueError(f"shape mismatch {u_tilde.shape} vs {obs.shape}")
    if obs.min() < 0:
        raise ValueError("observed counts must be >= 0")
    if t == 0:
        return u_tilde.copy()
    a = u_tilde - t
    root = np.sqrt(a**2 + 4.0 * t * obs)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(a >= 0, (a + root) / 2.0, 2.0 * t * obs / (root - a))
    return np.where((obs == 0) & (a < 0), 0.0, out)


def ipiano_minimize(grad_F, energy_F, prox_G, energy_G, u0: np.ndarray,
                    cfg: SolverConfig) -> tuple[np.ndarray, SolverTrace]:
    """Minimize F(u) + G(u) from u0; returns the iterate and the trace.

    grad_F, energy_F : smooth part and its gradient
    prox_G : (u_tilde, tau) -> argmin_u 1/2|u - u_tilde|^2 + tau G(u)
    energy_G : G itself, only logged in the trace
    """
    u = np.asarray(u0, dtype=np.float64).copy()
    u_prev = u.copy()
    L = cfg.lipschitz_init
    trace = SolverTrace()

    for n in range(cfg.max_iters):
        f_u = energy_F(u)
        if not np.isfinite(f_u):
            raise NumericalFailure(f"non-finite smooth energy at iteration {n}", trace)
        g = grad_F(u)
        inertia = cfg.gamma * (u - u_prev)
        while True:
            tau = cfg.step_size(L)
            u_new = prox_G(u - tau * g + inertia, tau)
            du = u_new - u
            f_new = energy_F(u_new)
            sq = float(np.vdot(du, du))
            gd = float(np.vdot(g, du))
            slack = f_new - (f_u + gd + 0.5 * L * sq)
            tol = _SLACK_RTOL * (abs(f_u) + abs(f_new) + abs(gd) + 0.5 * L * sq)
            if np.isfinite(f_new) and slack <= tol:
                break
            L *= cfg.backtrack_factor
            if L > cfg.max_lipschitz:
                raise NumericalFailure(f"backtracking stalled at iteration {n}", trace)

        step = np.sqrt(sq)
        trace.iteration.append(n)
        trace.F.append(f_new)
        trace.G.append(energy_G(u_new))
        trace.L.append(L)
        trace.step_norm.append(step)
        trace.descent_slack.append(slack)
        trace.slack_tol.append(tol)

        u_prev, u = u, u_new
        L /= cfg.relax_factor
        if step < cfg.rel_tol * max(np.linalg.norm(u_prev), 1e-300):
            break
    return u, trace
