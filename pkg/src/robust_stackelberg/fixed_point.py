"""Outer fixed-point loops around the linear leader problem.

Semilinear case: write ``f(s) = g(s) s`` with ``g(s) = int_0^1 f'(sigma s) dsigma``,
freeze ``a_z = g(z)`` and ``c_z = f'(z)`` at the previous state iterate z, solve
the linear hierarchy, and set the next iterate to the resulting state (the map
Lambda).  Box-constrained case: freeze the projection coefficients of the
previous adjoint iterate instead.  Both loops are plain Picard iterations; the
existence argument they mirror is not constructive, so divergence is detected
and reported rather than ruled out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coupled import RobustParams, coupling_field, solve_optimality_system
from .errors import ConvergenceError
from .follower import AdmissibleBox, SaddleSolution, projection_coefficient, solve_saddle_projected
from .leader import LeaderSolution, minimize_F_eps, verify_null_control
from .mesh import Regions, SpaceTimeField, norm_Omega, norm_Q
from .pde import Nonlinearity, Potential, linearization_potential, midpoint_potential

DEFAULT_OUTER_TOL = 1e-6
DEFAULT_MAX_OUTER = 50
STALL_WINDOW = 5


def g_of(f: Nonlinearity, s, n_quad: int = 2000):
    """Composite trapezoid rule for ``int_0^1 f'(sigma s) dsigma``; ``s`` may be an array.

    The leading Euler-Maclaurin term ``-h^2/12 (F'(1) - F'(0))`` with
    ``F'(sigma) = s f''(sigma s)`` is subtracted, so the rule is fourth order.
    """
    if n_quad < 2:
        raise ValueError("n_quad must be at least 2")
    s = np.asarray(s, float)
    step = 1.0 / (n_quad - 1)
    sigma = np.linspace(0.0, 1.0, n_quad)
    weights = np.full(n_quad, step)
    weights[0] = weights[-1] = 0.5 * step
    # offset by f'(0) so constants (s = 0, linear f) are reproduced exactly
    base = f.f_prime(0.0 * s)
    total = np.zeros_like(s)
    for sg, w in zip(sigma, weights):  # accumulate to keep memory at one field
        total += w * (f.f_prime(sg * s) - base)
    total += base
    total -= step**2 / 12 * s * (f.f_double_prime(s) - f.f_double_prime(0.0 * s))
    return total if total.ndim else float(total)


@dataclass
class FixedPointReport:
    outer_iterations: int
    successive_diffs: list
    converged: bool
    per_iteration_h_norms: list
    potential_sup_norms: list = field(default_factory=list)
    linear_terminal_norm: float = float("nan")
    verified_terminal_norm: float = float("nan")
    flags: list = field(default_factory=list)
    leader: LeaderSolution | None = None
    saddle: SaddleSolution | None = None
    vi_slack_v: float | None = None
    vi_slack_psi: float | None = None


def _stalled(diffs) -> bool:
    """True when the last STALL_WINDOW differences never decreased."""
    if len(diffs) <= STALL_WINDOW:
        return False
    tail = diffs[-(STALL_WINDOW + 1):]
    return all(b >= a for a, b in zip(tail, tail[1:]))


def frozen_potentials(f: Nonlinearity, z: SpaceTimeField, n_quad: int = 2000):
    """``(a_z, c_z) = (g(zbar), f'(zbar))`` at the interval midpoint states of z."""
    return midpoint_potential(lambda s: g_of(f, s, n_quad), z), linearization_potential(f, z)


def solve_semilinear_hierarchy(
    f: Nonlinearity,
    y0,
    yd: SpaceTimeField,
    params: RobustParams,
    masks: Regions,
    epsilon: float,
    outer_tol: float = DEFAULT_OUTER_TOL,
    max_outer: int = DEFAULT_MAX_OUTER,
    n_quad: int = 2000,
    cg_tol: float = 1e-10,
    max_cg: int = 500,
):
    """Picard iteration on Lambda; returns ``(y, q, h, report)``.

    ``y`` and ``q`` come from the final verification solve of the genuinely
    semilinear optimality system with the converged leader control.
    """
    grid = yd.grid
    y0 = np.asarray(y0, float)
    z = grid.zeros()
    a_z, c_z = frozen_potentials(f, z, n_quad)
    diffs, h_norms, sups, flags = [], [], [], []
    converged = False
    sol = None
    k = 0
    for k in range(1, max_outer + 1):
        bound = f.lipschitz_bound * (1 + 1e-12)
        sups.append((a_z.sup_norm, c_z.sup_norm))
        if a_z.sup_norm > bound or c_z.sup_norm > bound:
            flags.append(f"potential bound exceeded at iteration {k}")
        try:
            sol = minimize_F_eps(y0, yd, a_z, c_z, params, masks, epsilon, cg_tol, max_cg, phiT0=None if sol is None else sol.phiT)
        except ConvergenceError as exc:
            raise ConvergenceError(f"outer iteration {k}: {exc}", getattr(exc, "report", None)) from exc
        h_norms.append(sol.h_norm)
        y_new = sol.y
        diffs.append(norm_Q(y_new - z))
        a_new, c_new = frozen_potentials(f, y_new, n_quad)
        unchanged = np.array_equal(a_new.mid, a_z.mid) and np.array_equal(c_new.mid, c_z.mid)
        z, a_z, c_z = y_new, a_new, c_new
        if diffs[-1] <= outer_tol or unchanged:
            converged = True
            break
        if _stalled(diffs):
            flags.append(f"successive differences stopped decreasing at iteration {k}")
            break
    terminal, y, q = verify_null_control(sol.h, y0, yd, f, params, masks)
    report = FixedPointReport(
        outer_iterations=k,
        successive_diffs=diffs,
        converged=converged,
        per_iteration_h_norms=h_norms,
        potential_sup_norms=sups,
        linear_terminal_norm=sol.terminal_norm,
        verified_terminal_norm=terminal,
        flags=flags + list(sol.flags),
        leader=sol,
    )
    return y, q, sol.h, report


def projected_coupling(q: SpaceTimeField, params: RobustParams, box: AdmissibleBox, masks: Regions) -> np.ndarray:
    """Coupling with frozen coefficients ``sigma(q) = rho_{E1}(-q/ell^2)`` on O and ``rho_{E2}(q/gamma^2)``."""
    chi_O = masks.O.indicator
    sigma = projection_coefficient(-q.values * chi_O / params.ell**2, box.E1)
    rho = projection_coefficient(q.values / params.gamma**2, box.E2)
    return coupling_field(params, masks, sigma=sigma, rho=rho)


def solve_projected_hierarchy(
    a: Potential,
    y0,
    yd: SpaceTimeField,
    params: RobustParams,
    box: AdmissibleBox,
    masks: Regions,
    epsilon: float,
    outer_tol: float = DEFAULT_OUTER_TOL,
    max_outer: int = DEFAULT_MAX_OUTER,
    cg_tol: float = 1e-10,
    max_cg: int = 500,
    n_probes: int = 100,
    seed: int = 0,
):
    """Picard iteration on the frozen projection coefficients; returns ``(y, q, h, report)``.

    At convergence the follower saddle for the final h is recomputed with the
    projected ascent-descent solver, whose state, adjoint and variational
    inequality slacks are reported.
    """
    if isinstance(a, Nonlinearity):
        raise TypeError("the box-constrained hierarchy is only posed for linear dynamics")
    grid = yd.grid
    y0 = np.asarray(y0, float)
    q_tilde = grid.zeros()
    diffs, h_norms, flags = [], [], []
    converged = False
    sol = None
    k = 0
    for k in range(1, max_outer + 1):
        b = projected_coupling(q_tilde, params, box, masks)
        sol = minimize_F_eps(y0, yd, a, a, params, masks, epsilon, cg_tol, max_cg, phiT0=None if sol is None else sol.phiT, coupling=b)
        h_norms.append(sol.h_norm)
        diffs.append(norm_Q(sol.q - q_tilde))
        unchanged = np.array_equal(projected_coupling(sol.q, params, box, masks), b)
        q_tilde = SpaceTimeField(grid, sol.q.values)
        if diffs[-1] <= outer_tol or unchanged:
            converged = True
            break
        if _stalled(diffs):
            flags.append(f"successive differences stopped decreasing at iteration {k}")
            break
    saddle = solve_saddle_projected(sol.h, y0, yd, a, params, box, masks, n_probes=n_probes, seed=seed)
    if not saddle.converged:
        flags.extend(saddle.flags or ["projected follower did not converge"])
    report = FixedPointReport(
        outer_iterations=k,
        successive_diffs=diffs,
        converged=converged,
        per_iteration_h_norms=h_norms,
        linear_terminal_norm=sol.terminal_norm,
        verified_terminal_norm=norm_Omega(saddle.y.final, grid),
        flags=flags + list(sol.flags),
        leader=sol,
        saddle=saddle,
        vi_slack_v=saddle.vi_slack_v,
        vi_slack_psi=saddle.vi_slack_psi,
    )
    return saddle.y, saddle.q, sol.h, report


def unconstrained_linear_hierarchy(a: Potential, y0, yd, params, masks, epsilon, cg_tol=1e-10, max_cg=500):
    """The plain linear hierarchy (no box), for comparison with the projected loop."""
    sol = minimize_F_eps(y0, yd, a, a, params, masks, epsilon, cg_tol, max_cg)
    y, q, _ = solve_optimality_system(a, a, sol.h, y0, yd, params, masks, tol=1e-13)
    return y, q, sol.h, sol
