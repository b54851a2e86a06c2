"""Leader control by penalized HUM.

The dual functional over terminal adjoint data ``phiT`` is

    F_eps(phiT) = 1/2 |phi|^2_{omega x (0,T)} + pen(phiT) + <y0, phi(0)> - <yd, theta>_{O_d x (0,T)}

with ``pen = eps/2 |phiT|^2`` (quadratic, the default) or ``eps |phiT|``
(exact_norm).  Its gradient is ``y(T) + pen'(phiT)`` where y solves the follower
optimality system with ``h = phi chi_omega``.  All vectors over space use the
discrete L^2(Omega) pairing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .carleman import weighted_target_norm
from .coupled import (
    DEFAULT_MAX_SWEEPS,
    RobustParams,
    solve_adjoint_pair,
    solve_optimality_semilinear,
    solve_optimality_system,
)
from .errors import ConvergenceError
from .mesh import Regions, SpaceTimeField, inner_product_Omega, inner_product_Q, norm_Omega, norm_Q
from .pde import Nonlinearity, Potential

PENALTY_MODES = ("quadratic", "exact_norm")
INNER_TOL = 1e-13


@dataclass
class LeaderSolution:
    h: SpaceTimeField
    phiT: np.ndarray
    terminal_norm: float
    h_norm: float
    cg_iterations: int
    cg_residuals: list
    epsilon: float
    penalty_mode: str
    converged: bool
    uncontrolled_norm: float
    identity_residual: float
    y: SpaceTimeField
    q: SpaceTimeField
    objective_history: list = field(default_factory=list)
    flags: list = field(default_factory=list)


class LeaderProblem:
    """Linear leader problem: potentials, weights, regions and an optional frozen coupling."""

    def __init__(self, a: Potential, c: Potential, params: RobustParams, masks: Regions, coupling=None, inner_tol: float = INNER_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS):
        self.a, self.c, self.params, self.masks = a, c, params, masks
        self.grid = a.grid
        self.coupling = coupling
        self.inner_tol = inner_tol
        self.max_sweeps = max_sweeps

    def _check(self, report, what):
        if not report.converged:
            raise ConvergenceError(f"{what} did not converge (residual {report.final_residual:.3e} after {report.iterations} sweeps)", report)

    def adjoint(self, phiT):
        phi, theta, report = solve_adjoint_pair(
            self.a, self.c, phiT, self.params, self.masks, tol=self.inner_tol, max_sweeps=self.max_sweeps, coupling=self.coupling
        )
        self._check(report, "adjoint pair")
        return phi, theta

    def state(self, h, y0, yd):
        y, q, report = solve_optimality_system(
            self.a, self.c, h, y0, yd, self.params, self.masks, tol=self.inner_tol, max_sweeps=self.max_sweeps, coupling=self.coupling
        )
        self._check(report, "optimality system")
        return y, q

    def control_from(self, phi: SpaceTimeField) -> SpaceTimeField:
        return phi.masked(self.masks.omega)

    def gramian(self, u) -> np.ndarray:
        """``u -> y(T)`` with ``h = phi_u chi_omega`` and zero y0, yd."""
        if not np.any(u):
            return np.zeros_like(u)
        phi, _ = self.adjoint(u)
        y, _ = self.state(self.control_from(phi), np.zeros(self.grid.n_interior), self.grid.zeros())
        return y.final.copy()

    def hessian_vector(self, u, epsilon: float) -> np.ndarray:
        return self.gramian(u) + epsilon * np.asarray(u, float)

    def uncontrolled_terminal(self, y0, yd) -> np.ndarray:
        y, _ = self.state(self.grid.zeros(), y0, yd)
        return y.final.copy()


def _check_mode(epsilon, penalty_mode):
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive (got {epsilon})")
    if penalty_mode not in PENALTY_MODES:
        raise ValueError(f"penalty_mode must be one of {PENALTY_MODES}")


def _penalty(u, grid, epsilon, penalty_mode):
    n = norm_Omega(u, grid)
    return 0.5 * epsilon * n**2 if penalty_mode == "quadratic" else epsilon * n


def eval_F_eps(phiT, y0, yd, a, c, params, masks, epsilon, penalty_mode="quadratic", coupling=None) -> float:
    _check_mode(epsilon, penalty_mode)
    prob = LeaderProblem(a, c, params, masks, coupling)
    grid = prob.grid
    phiT = np.asarray(phiT, float)
    phi, theta = prob.adjoint(phiT)
    return (
        0.5 * inner_product_Q(phi, phi, masks.omega)
        + _penalty(phiT, grid, epsilon, penalty_mode)
        + inner_product_Omega(y0, phi.start, grid=grid)
        - inner_product_Q(yd, theta, masks.O_d)
    )


def grad_F_eps(phiT, y0, yd, a, c, params, masks, epsilon, penalty_mode="quadratic", coupling=None) -> np.ndarray:
    """``y(T) + pen'(phiT)``; in exact_norm mode the penalty term is dropped at ``phiT = 0``."""
    _check_mode(epsilon, penalty_mode)
    prob = LeaderProblem(a, c, params, masks, coupling)
    phiT = np.asarray(phiT, float)
    phi, _ = prob.adjoint(phiT)
    y, _ = prob.state(prob.control_from(phi), y0, yd)
    grad = y.final.copy()
    if penalty_mode == "quadratic":
        return grad + epsilon * phiT
    n = norm_Omega(phiT, prob.grid)
    return grad + epsilon * phiT / n if n > 0 else grad


def hessian_vector(u, a, c, params, masks, epsilon, coupling=None) -> np.ndarray:
    return LeaderProblem(a, c, params, masks, coupling).hessian_vector(np.asarray(u, float), epsilon)


def conjugate_gradient(apply, rhs, grid, x0=None, tol=1e-10, max_iter=500):
    """CG for ``apply(x) = rhs`` in the L^2(Omega) pairing.

    Stops on ``|r| <= tol |rhs|``.  Returns ``(x, residual_history, objective_history, converged)``
    where the objective is ``1/2 <apply x, x> - <rhs, x>``.
    """

    def dot(u, w):
        return inner_product_Omega(u, w, grid=grid)

    x = np.zeros_like(rhs) if x0 is None else np.array(x0, float)
    r = rhs - apply(x) if np.any(x) else rhs.copy()
    rhs_norm = np.sqrt(dot(rhs, rhs))
    residuals = [np.sqrt(dot(r, r))]
    objective = [-0.5 * dot(x, r + rhs)]
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), residuals, objective, True
    p = r.copy()
    rr = dot(r, r)
    converged = residuals[-1] <= tol * rhs_norm
    for _ in range(max_iter):
        if converged:
            break
        Ap = apply(p)
        pAp = dot(p, Ap)
        if pAp <= 0:
            break
        step = rr / pAp
        x = x + step * p
        r = r - step * Ap
        rr_new = dot(r, r)
        residuals.append(np.sqrt(rr_new))
        objective.append(-0.5 * dot(x, r + rhs))
        converged = residuals[-1] <= tol * rhs_norm
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, residuals, objective, converged


def minimize_F_eps(
    y0,
    yd,
    a: Potential,
    c: Potential,
    params: RobustParams,
    masks: Regions,
    epsilon: float,
    cg_tol: float = 1e-10,
    max_cg: int = 500,
    penalty_mode: str = "quadratic",
    phiT0=None,
    coupling=None,
    inner_tol: float = INNER_TOL,
) -> LeaderSolution:
    """Minimize F_eps and return the leader control ``h = phi chi_omega`` with diagnostics.

    Quadratic mode runs CG on ``(G + eps) phiT = -y_unc(T)``, where G is the
    map ``phiT -> y(T)`` at zero data.  exact_norm mode uses that the minimizer
    of the norm-penalized functional solves the quadratic problem for the
    penalty ``eps' = eps / |phiT|``: a scalar root search in ``eps'`` enforces
    ``|y(T)| = eps`` (or returns ``phiT = 0`` when ``|y_unc(T)| <= eps``).
    """
    _check_mode(epsilon, penalty_mode)
    prob = LeaderProblem(a, c, params, masks, coupling, inner_tol)
    grid = prob.grid
    y0 = np.asarray(y0, float)
    b = prob.uncontrolled_terminal(y0, yd)
    unc = norm_Omega(b, grid)
    flags = []

    def quad_solve(eps, x0):
        return conjugate_gradient(lambda u: prob.hessian_vector(u, eps), -b, grid, x0, cg_tol, max_cg)

    if penalty_mode == "quadratic":
        phiT, residuals, objective, converged = quad_solve(epsilon, phiT0)
        iterations = len(residuals) - 1
    else:
        iterations, residuals, objective = 0, [], []
        cache = {}

        def excess(log_eps):
            nonlocal iterations
            x, res, obj, conv = quad_solve(np.exp(log_eps), cache.get("x"))
            iterations += len(res) - 1
            residuals.extend(res)
            objective.extend(obj)
            cache["x"] = x
            cache[log_eps] = (x, conv)
            return np.log(np.exp(log_eps) * max(norm_Omega(x, grid), 1e-300)) - np.log(epsilon)

        if unc <= epsilon:
            phiT, converged = np.zeros_like(b), True
        else:
            lo = hi = np.log(epsilon)
            while excess(hi) < 0:
                hi += np.log(10.0)
            while excess(lo) > 0:
                lo -= np.log(10.0)
                if lo < np.log(epsilon) - 60:
                    raise ConvergenceError("exact_norm bracket search failed")
            root = brentq(excess, lo, hi, xtol=1e-12, rtol=1e-12)
            excess(root)
            phiT, converged = cache[root]

    if not converged:
        flags.append(f"CG stopped after {iterations} iterations above tolerance")
    phi, _ = prob.adjoint(phiT)
    h = prob.control_from(phi)
    y, q = prob.state(h, y0, yd)
    pen_grad = epsilon * phiT
    if penalty_mode == "exact_norm":
        n = norm_Omega(phiT, grid)
        pen_grad = epsilon * phiT / n if n > 0 else np.zeros_like(phiT)
    return LeaderSolution(
        h=h,
        phiT=phiT,
        terminal_norm=norm_Omega(y.final, grid),
        h_norm=norm_Q(h, masks.omega),
        cg_iterations=iterations,
        cg_residuals=residuals,
        epsilon=epsilon,
        penalty_mode=penalty_mode,
        converged=converged,
        uncontrolled_norm=unc,
        identity_residual=norm_Omega(y.final + pen_grad, grid),
        y=y,
        q=q,
        objective_history=objective,
        flags=flags,
    )


def verify_null_control(h, y0, yd, model, params: RobustParams, masks: Regions, c: Potential | None = None, coupling=None, tol: float = INNER_TOL):
    """Re-solve the follower optimality system for ``h`` and return ``(|y(T)|, y, q)``.

    ``model`` is a Potential (linear dynamics, adjoint potential ``c`` defaulting
    to the same) or a Nonlinearity.
    """
    if isinstance(model, Nonlinearity):
        y, q, report = solve_optimality_semilinear(model, h, y0, yd, params, masks, tol=tol, coupling=coupling)
    else:
        y, q, report = solve_optimality_system(model, model if c is None else c, h, y0, yd, params, masks, tol=tol, coupling=coupling)
    if not report.converged:
        raise ConvergenceError("optimality system did not converge during verification", report)
    return norm_Omega(y.final, h.grid), y, q


@dataclass
class ControlBoundReport:
    epsilon: float
    h_norm: float
    y0_norm: float
    weighted_target_norm: float
    ratio: float
    target_admissible: bool


def control_bound_report(solution: LeaderSolution, y0, yd, weights, masks: Regions) -> ControlBoundReport:
    """``h_norm / (|y0| + |rho yd|)`` with the weighted target norm taken over O_d x (0,T)."""
    grid = solution.h.grid
    wn = weighted_target_norm(yd, weights, masks.O_d)
    y0_norm = norm_Omega(y0, grid)
    denom = y0_norm + wn.value
    ratio = solution.h_norm / denom if denom > 0 and np.isfinite(denom) else float("nan")
    return ControlBoundReport(solution.epsilon, solution.h_norm, y0_norm, wn.value, ratio, not wn.divergent)


@dataclass
class EpsilonSweep:
    solutions: list
    reports: list

    @property
    def ratio_spread(self) -> float:
        ratios = [r.ratio for r in self.reports]
        return max(ratios) / min(ratios) if min(ratios) > 0 else float("inf")

    @property
    def terminal_norms(self) -> list:
        return [s.terminal_norm for s in self.solutions]

    @property
    def h_norms(self) -> list:
        return [s.h_norm for s in self.solutions]


def epsilon_sweep(y0, yd, a, c, params, masks, epsilons, weights, cg_tol=1e-10, max_cg=500, penalty_mode="quadratic", coupling=None) -> EpsilonSweep:
    """Solve along decreasing eps, warm-starting each CG run from the previous minimizer."""
    solutions, reports = [], []
    phiT0 = None
    for eps in sorted(epsilons, reverse=True):
        sol = minimize_F_eps(y0, yd, a, c, params, masks, eps, cg_tol, max_cg, penalty_mode, phiT0, coupling)
        phiT0 = sol.phiT
        solutions.append(sol)
        reports.append(control_bound_report(sol, y0, yd, weights, masks))
    return EpsilonSweep(solutions, reports)
