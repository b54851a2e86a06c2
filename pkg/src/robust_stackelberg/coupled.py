"""Forward-backward coupled systems and their monolithic oracle.

Follower optimality system (state forward, adjoint backward)::

    y_t - y_xx + a y = h chi_omega + b q,        y(0) = y0
   -q_t - q_xx + c q = (y - yd) chi_Od,           q(T) = 0

Leader adjoint pair (phi backward, theta forward)::

   -phi_t - phi_xx + a phi = theta chi_Od,        phi(T) = phiT
    theta_t - theta_xx + c theta = b phi,          theta(0) = 0

with the coupling coefficient ``b = -chi_O / ell^2 + 1 / gamma^2`` (or a
frozen-projection variant of it).  Both are solved by damped block sweeps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.linalg.lapack import dgecon

from .mesh import Regions, SpaceTimeField
from .pde import (
    Potential,
    linearization_potential,
    solve_backward_linear,
    solve_forward_linear,
    solve_forward_semilinear,
)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_SWEEPS = 200
RELAXATION_FLOOR = 0.25


@dataclass(frozen=True)
class RobustParams:
    ell: float
    gamma: float
    contraction_threshold: float = 1.0

    def __post_init__(self):
        if not (self.ell > 0 and self.gamma > 0):
            raise ValueError(f"ell and gamma must be positive (got ell={self.ell}, gamma={self.gamma})")

    @property
    def coupling_strength(self) -> float:
        return 1.0 / self.ell**2 + 1.0 / self.gamma**2

    @property
    def weak_coupling_warning(self) -> bool:
        """True when 1/ell^2 + 1/gamma^2 exceeds the contraction heuristic (not a proven bound)."""
        return self.coupling_strength > self.contraction_threshold


@dataclass
class CoupledSolveReport:
    iterations: int
    final_residual: float
    converged: bool
    relaxation: float
    residuals: list


def coupling_field(params: RobustParams, masks: Regions, sigma=None, rho=None) -> np.ndarray:
    """Nodal coefficient ``b`` multiplying the adjoint in the state equation.

    ``sigma`` and ``rho`` are optional frozen projection coefficients for the
    follower control and the disturbance (both default to 1).
    """
    grid = masks.O.grid
    sigma = 1.0 if sigma is None else sigma
    rho = 1.0 if rho is None else rho
    b = -sigma * masks.O.indicator / params.ell**2 + rho / params.gamma**2
    return np.broadcast_to(b, grid.shape).astype(float)


def sweep(
    solve_first: Callable[[SpaceTimeField], SpaceTimeField],
    solve_second: Callable[[SpaceTimeField], SpaceTimeField],
    second0: SpaceTimeField,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    relaxation: float = 1.0,
):
    """Damped block Gauss-Seidel on a two-field system.

    One sweep computes ``first = solve_first(second)`` and then relaxes
    ``second`` toward ``solve_second(first)``.  The residual is the sup of the
    change of both fields relative to the larger sup of the two fields, so the
    iteration count does not depend on the scale of the data.  The relaxation
    halves whenever the residual grows, down to 0.25.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0 < relaxation <= 1:
        raise ValueError("relaxation must lie in (0, 1]")
    second = second0
    first_prev = None
    residuals = []
    converged = False
    it = 0
    for it in range(1, max_sweeps + 1):
        first = solve_first(second)
        cand = solve_second(first)
        new_second = cand if relaxation == 1.0 else second * (1.0 - relaxation) + cand * relaxation
        change = np.max(np.abs(new_second.values - second.values))
        if first_prev is not None:
            change = max(change, np.max(np.abs(first.values - first_prev.values)))
        scale = max(np.max(np.abs(first.values)), np.max(np.abs(new_second.values)))
        res = float(change / scale) if scale > 0 else float(change)
        residuals.append(res)
        second, first_prev = new_second, first
        if res <= tol:
            converged = True
            break
        if len(residuals) > 1 and res > residuals[-2] and relaxation > RELAXATION_FLOOR:
            relaxation = max(RELAXATION_FLOOR, 0.5 * relaxation)
    report = CoupledSolveReport(it, residuals[-1] if residuals else 0.0, converged, relaxation, residuals)
    return first, second, report


def solve_optimality_system(
    a: Potential,
    c: Potential,
    h: SpaceTimeField,
    y0,
    yd: SpaceTimeField,
    params: RobustParams,
    masks: Regions,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    relaxation: float = 1.0,
    coupling: np.ndarray | None = None,
):
    """Return ``(y, q, report)`` for the linear follower optimality system."""
    grid = h.grid
    b = coupling_field(params, masks) if coupling is None else coupling
    control = h.masked(masks.omega)
    target = yd.masked(masks.O_d)
    zero = np.zeros(grid.n_interior)

    def state(q):
        return solve_forward_linear(a, control + SpaceTimeField(grid, b * q.values), y0)

    def adjoint(y):
        return solve_backward_linear(c, y.masked(masks.O_d) - target, zero)

    q0 = SpaceTimeField(grid, np.zeros(grid.shape), zero)
    return sweep(state, adjoint, q0, tol, max_sweeps, relaxation)


def solve_adjoint_pair(
    a: Potential,
    c: Potential,
    phiT,
    params: RobustParams,
    masks: Regions,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    relaxation: float = 1.0,
    coupling: np.ndarray | None = None,
):
    """Return ``(phi, theta, report)``; ``phi.initial`` is the t = 0 trace."""
    grid = a.grid
    b = coupling_field(params, masks) if coupling is None else coupling
    zero = np.zeros(grid.n_interior)

    def backward(theta):
        return solve_backward_linear(a, theta.masked(masks.O_d), phiT)

    def forward(phi):
        return solve_forward_linear(c, SpaceTimeField(grid, b * phi.values), zero)

    phi, theta, report = sweep(backward, forward, grid.zeros(), tol, max_sweeps, relaxation)
    return phi, theta, report


# --------------------------------------------------------------------------- monolithic oracle


def _step_matrices(grid, mid_row):
    n = grid.n_interior
    lap = (2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)) / grid.dx**2
    K = lap + np.diag(mid_row)
    return np.eye(n) / grid.dt + 0.5 * K, np.eye(n) / grid.dt - 0.5 * K


def _trajectory_from_multipliers(K: int, n: int) -> np.ndarray:
    """Matrix mapping interval multipliers (mu_0..mu_{K-1}) to the nodal backward trajectory."""
    M = np.zeros(((K + 1) * n, K * n))
    eye = np.eye(n)
    M[0:n, 0:n] = eye
    for m in range(1, K):
        M[m * n:(m + 1) * n, (m - 1) * n:m * n] = 0.5 * eye
        M[m * n:(m + 1) * n, m * n:(m + 1) * n] = 0.5 * eye
    M[K * n:, (K - 1) * n:] = eye
    return M


@dataclass
class MonolithicInfo:
    n_unknowns: int
    rcond: float
    ill_conditioned: bool


def assemble_monolithic(
    kind: str,
    a: Potential,
    c: Potential,
    params: RobustParams,
    masks: Regions,
    h: SpaceTimeField | None = None,
    y0=None,
    yd: SpaceTimeField | None = None,
    phiT=None,
    coupling: np.ndarray | None = None,
    cap: int = 20_000,
):
    """Dense space-time matrix and right-hand side of either coupled system.

    Unknowns are the forward field at levels 1..K followed by the backward
    interval multipliers.  Returns ``(A, rhs, parts)`` where ``parts`` holds
    what :func:`solve_monolithic` needs to unpack the solution.
    """
    grid = masks.O.grid
    n, K, dt = grid.n_interior, grid.n_steps, grid.dt
    size = 2 * K * n
    if size > cap:
        raise ValueError(f"monolithic system has {size} unknowns, above the cap {cap}")
    b = coupling_field(params, masks) if coupling is None else coupling
    chi_d = masks.O_d.indicator
    Pa, Na = zip(*(_step_matrices(grid, a.mid[k]) for k in range(K)))
    Pc, Nc = zip(*(_step_matrices(grid, c.mid[k]) for k in range(K)))
    traj = _trajectory_from_multipliers(K, n)
    A = np.zeros((size, size))
    rhs = np.zeros(size)
    F0 = K * n  # offset of the multiplier block

    def fw(m):  # column block of forward unknown at time level m >= 1
        return slice((m - 1) * n, m * n)

    def mu(k):
        return slice(F0 + k * n, F0 + (k + 1) * n)

    if kind == "optimality":
        fwd_P, fwd_N, bwd_P, bwd_N = Pa, Na, Pc, Nc
        y0 = np.zeros(n) if y0 is None else np.asarray(y0, float)
        hv = h.values * masks.omega.indicator
        ydv = yd.values * chi_d
        fwd_init = y0
        fwd_src = 0.5 * (hv[1:] + hv[:-1])
        bwd_terminal = np.zeros(n)
        bwd_shift = -ydv  # backward source is chi_d * (forward) + shift
    elif kind == "adjoint":
        fwd_P, fwd_N, bwd_P, bwd_N = Pc, Nc, Pa, Na
        fwd_init = np.zeros(n)
        fwd_src = np.zeros((K, n))
        bwd_terminal = np.asarray(phiT, float)
        bwd_shift = np.zeros((K + 1, n))
    else:
        raise ValueError(f"unknown system kind {kind!r}")

    # forward rows: P_k u^{k+1} - N_k u^k - (B^k w^k + B^{k+1} w^{k+1}) / 2 = src_k, w = traj @ mu
    for k in range(K):
        rows = slice(k * n, (k + 1) * n)
        A[rows, fw(k + 1)] += fwd_P[k]
        if k > 0:
            A[rows, fw(k)] -= fwd_N[k]
        else:
            rhs[rows] += fwd_N[0] @ fwd_init
        for lev in (k, k + 1):
            A[rows, F0:] -= 0.5 * b[lev][:, None] * traj[lev * n:(lev + 1) * n]
        rhs[rows] += fwd_src[k]
    # backward rows, in multiplier form
    rows = slice(F0 + (K - 1) * n, F0 + K * n)
    A[rows, mu(K - 1)] += dt * bwd_P[K - 1]
    A[rows, fw(K)] -= 0.5 * dt * np.diag(chi_d)
    rhs[rows] += bwd_terminal + 0.5 * dt * bwd_shift[K]
    for m in range(1, K):
        rows = slice(F0 + (m - 1) * n, F0 + m * n)
        A[rows, mu(m - 1)] += dt * bwd_P[m - 1]
        A[rows, mu(m)] -= dt * bwd_N[m]
        A[rows, fw(m)] -= dt * np.diag(chi_d)
        rhs[rows] += dt * bwd_shift[m]

    parts = dict(kind=kind, grid=grid, traj=traj, fwd_init=fwd_init, bwd_N0=bwd_N[0], chi_d=chi_d, yd=yd)
    return A, rhs, parts


def solve_monolithic(
    kind: str,
    a: Potential,
    c: Potential,
    params: RobustParams,
    masks: Regions,
    h: SpaceTimeField | None = None,
    y0=None,
    yd: SpaceTimeField | None = None,
    phiT=None,
    coupling: np.ndarray | None = None,
    cap: int = 20_000,
    rcond_warn: float = 1e-12,
):
    """Assemble the full space-time block system and solve it with dense LU.

    ``kind='optimality'`` returns ``(y, q, info)``; ``kind='adjoint'`` returns
    ``(phi, theta, info)``.  A RuntimeWarning is issued when the reciprocal
    condition estimate falls below ``rcond_warn``.  Test oracle only.
    """
    A, rhs, parts = assemble_monolithic(kind, a, c, params, masks, h, y0, yd, phiT, coupling, cap)
    grid, traj, fwd_init, chi_d = parts["grid"], parts["traj"], parts["fwd_init"], parts["chi_d"]
    n, K, dt = grid.n_interior, grid.n_steps, grid.dt
    F0 = K * n
    anorm = np.linalg.norm(A, 1)
    lu, piv = lu_factor(A, check_finite=False)
    rcond, _ = dgecon(lu, anorm, norm="1")
    ill = bool(rcond < rcond_warn)
    if ill:
        warnings.warn(f"monolithic system is nearly singular (rcond={rcond:.2e})", RuntimeWarning, stacklevel=2)
    sol = lu_solve((lu, piv), rhs, check_finite=False)

    fwd_vals = np.vstack([fwd_init[None, :], sol[:F0].reshape(K, n)])
    mus = sol[F0:].reshape(K, n)
    bwd_vals = (traj @ sol[F0:]).reshape(K + 1, n)
    if kind == "optimality":
        r0 = chi_d * (fwd_vals[0] - yd.values[0])
    else:
        r0 = chi_d * fwd_vals[0]
    initial = dt * (parts["bwd_N0"] @ mus[0]) + 0.5 * dt * r0
    info = MonolithicInfo(A.shape[0], float(rcond), ill)
    forward_field = SpaceTimeField(grid, fwd_vals)
    backward_field = SpaceTimeField(grid, bwd_vals, initial)
    if kind == "optimality":
        return forward_field, backward_field, info
    return backward_field, forward_field, info


def solve_optimality_semilinear(
    f,
    h: SpaceTimeField,
    y0,
    yd: SpaceTimeField,
    params: RobustParams,
    masks: Regions,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    relaxation: float = 1.0,
    coupling: np.ndarray | None = None,
    control_map: Callable[[SpaceTimeField], SpaceTimeField] | None = None,
):
    """Follower system with the nonlinear state equation and adjoint potential f'(y).

    ``control_map(q)`` overrides the linear follower response ``b q``.
    """
    grid = h.grid
    b = coupling_field(params, masks) if coupling is None else coupling
    control = h.masked(masks.omega)
    target = yd.masked(masks.O_d)
    zero = np.zeros(grid.n_interior)
    response = control_map or (lambda q: SpaceTimeField(grid, b * q.values))

    def state(q):
        return solve_forward_semilinear(f, control + response(q), y0)

    def adjoint(y):
        return solve_backward_linear(linearization_potential(f, y), y.masked(masks.O_d) - target, zero)

    q0 = SpaceTimeField(grid, np.zeros(grid.shape), zero)
    return sweep(state, adjoint, q0, tol, max_sweeps, relaxation)


def solve_optimality_response(
    a: Potential,
    h: SpaceTimeField,
    y0,
    yd: SpaceTimeField,
    masks: Regions,
    control_map: Callable[[SpaceTimeField], SpaceTimeField],
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    relaxation: float = 1.0,
):
    """Linear dynamics with a general (possibly nonlinear) follower response ``control_map(q)``."""
    grid = h.grid
    control = h.masked(masks.omega)
    target = yd.masked(masks.O_d)
    zero = np.zeros(grid.n_interior)

    def state(q):
        return solve_forward_linear(a, control + control_map(q), y0)

    def adjoint(y):
        return solve_backward_linear(a, y.masked(masks.O_d) - target, zero)

    q0 = SpaceTimeField(grid, np.zeros(grid.shape), zero)
    return sweep(state, adjoint, q0, tol, max_sweeps, relaxation)
