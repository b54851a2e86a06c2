"""Robust follower: saddle point of the tracking functional in (v, psi) for a fixed leader control.

    J_r(v, psi) = 1/2 |y - yd|^2_{O_d x (0,T)} + 1/2 (ell^2 |v|^2_{O x (0,T)} - gamma^2 |psi|^2_Q)

minimized in the follower control v and maximized in the disturbance psi.  The
state model is either a :class:`Potential` (linear dynamics ``y_t - y_xx + a y``)
or a :class:`Nonlinearity` (``y_t - y_xx + f(y)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coupled import (
    DEFAULT_MAX_SWEEPS,
    RobustParams,
    solve_optimality_response,
    solve_optimality_semilinear,
    solve_optimality_system,
)
from .errors import ConvergenceError
from .mesh import Regions, SpaceTimeField, inner_product_Q, norm_Q
from .pde import (
    Nonlinearity,
    Potential,
    linearization_potential,
    solve_backward_linear,
    solve_forward_linear,
    solve_forward_semilinear,
    solve_linearized_first,
    solve_linearized_second,
)

GAMMA_TOO_SMALL = "gamma-too-small"


@dataclass(frozen=True)
class AdmissibleBox:
    """Pointwise intervals E1 (follower control) and E2 (disturbance), each containing 0."""

    e1_lo: float
    e1_hi: float
    e2_lo: float
    e2_hi: float

    def __post_init__(self):
        if not (self.e1_lo <= 0 <= self.e1_hi):
            raise ValueError(f"E1=[{self.e1_lo}, {self.e1_hi}] must contain 0")
        if not (self.e2_lo <= 0 <= self.e2_hi):
            raise ValueError(f"E2=[{self.e2_lo}, {self.e2_hi}] must contain 0")

    @property
    def E1(self) -> tuple[float, float]:
        return (self.e1_lo, self.e1_hi)

    @property
    def E2(self) -> tuple[float, float]:
        return (self.e2_lo, self.e2_hi)

    @classmethod
    def unbounded(cls) -> "AdmissibleBox":
        return cls(-np.inf, np.inf, -np.inf, np.inf)


@dataclass
class SaddleSolution:
    v_bar: SpaceTimeField
    psi_bar: SpaceTimeField
    y: SpaceTimeField
    q: SpaceTimeField
    J_value: float
    stationarity_v: float
    stationarity_psi: float
    mode: str
    converged: bool = True
    iterations: int = 0
    flags: list = field(default_factory=list)
    vi_slack_v: float | None = None
    vi_slack_psi: float | None = None


def _as_array(z):
    return z.values if isinstance(z, SpaceTimeField) else np.asarray(z, dtype=float)


def project(z, interval):
    """Pointwise clamp onto ``[lo, hi]``; keeps SpaceTimeField inputs as fields."""
    lo, hi = interval
    out = np.clip(_as_array(z), lo, hi)
    return SpaceTimeField(z.grid, out) if isinstance(z, SpaceTimeField) else out


def projection_coefficient(z, box_interval):
    """Coefficient ``rho(z)`` with ``rho(z) * z = clamp(z)``: 1 inside the interval, clamp(z)/z outside."""
    lo, hi = box_interval
    if not lo <= 0 <= hi:
        raise ValueError("projection interval must contain 0")
    arr = _as_array(z)
    clamped = np.clip(arr, lo, hi)
    inside = (arr >= lo) & (arr <= hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        coeff = np.where(inside, 1.0, clamped / np.where(arr == 0, 1.0, arr))
    return SpaceTimeField(z.grid, coeff) if isinstance(z, SpaceTimeField) else coeff


# --------------------------------------------------------------------------- functional and gradient


def eval_Jr(y: SpaceTimeField, v: SpaceTimeField, psi: SpaceTimeField, yd: SpaceTimeField, params: RobustParams, masks: Regions) -> float:
    misfit = y - yd
    return 0.5 * (
        inner_product_Q(misfit, misfit, masks.O_d)
        + params.ell**2 * inner_product_Q(v, v, masks.O)
        - params.gamma**2 * inner_product_Q(psi, psi)
    )


def solve_state(h, v, psi, y0, model, masks: Regions) -> SpaceTimeField:
    source = h.masked(masks.omega) + v.masked(masks.O) + psi
    if isinstance(model, Nonlinearity):
        return solve_forward_semilinear(model, source, y0)
    return solve_forward_linear(model, source, y0)


def solve_adjoint_state(y, yd, model, masks: Regions) -> SpaceTimeField:
    c = linearization_potential(model, y) if isinstance(model, Nonlinearity) else model
    return solve_backward_linear(c, (y - yd).masked(masks.O_d), np.zeros(y.grid.n_interior))


def state_and_gradient(v, psi, h, y0, yd, model, params: RobustParams, masks: Regions):
    """Return ``(y, q, grad_v, grad_psi)`` at (v, psi)."""
    y = solve_state(h, v, psi, y0, model, masks)
    q = solve_adjoint_state(y, yd, model, masks)
    grad_v = SpaceTimeField(y.grid, masks.O.indicator * (q.values + params.ell**2 * v.values))
    grad_psi = SpaceTimeField(y.grid, q.values - params.gamma**2 * psi.values)
    return y, q, grad_v, grad_psi


def grad_Jr(v, psi, h, y0, yd, model, params: RobustParams, masks: Regions):
    """Gradient of J_r in the L^2(Q) pairing: ``((q + ell^2 v) chi_O, q - gamma^2 psi)``."""
    _, _, gv, gp = state_and_gradient(v, psi, h, y0, yd, model, params, masks)
    return gv, gp


def _solution(v, psi, h, y0, yd, model, params, masks, mode, **extra) -> SaddleSolution:
    y, q, gv, gp = state_and_gradient(v, psi, h, y0, yd, model, params, masks)
    return SaddleSolution(
        v_bar=v,
        psi_bar=psi,
        y=y,
        q=q,
        J_value=eval_Jr(y, v, psi, yd, params, masks),
        stationarity_v=norm_Q(gv),
        stationarity_psi=norm_Q(gp),
        mode=mode,
        **extra,
    )


# --------------------------------------------------------------------------- saddle solvers


def solve_saddle_direct(h, y0, yd, model, params: RobustParams, masks: Regions, tol: float = 1e-12, max_sweeps: int = DEFAULT_MAX_SWEEPS) -> SaddleSolution:
    """Saddle from the coupled optimality system: ``v = -q/ell^2`` on O, ``psi = q/gamma^2``.

    Stationarity residuals come from an independent gradient evaluation.
    """
    if isinstance(model, Nonlinearity):
        y, q, report = solve_optimality_semilinear(model, h, y0, yd, params, masks, tol=tol, max_sweeps=max_sweeps)
    else:
        y, q, report = solve_optimality_system(model, model, h, y0, yd, params, masks, tol=tol, max_sweeps=max_sweeps)
    if not report.converged:
        raise ConvergenceError(f"follower optimality system did not converge in {report.iterations} sweeps", report)
    v_bar = q.masked(masks.O) * (-1.0 / params.ell**2)
    psi_bar = SpaceTimeField(q.grid, q.values / params.gamma**2)
    return _solution(v_bar, psi_bar, h, y0, yd, model, params, masks, "unconstrained", iterations=report.iterations)


def curvature_probe(v, psi, direction, h, y0, yd, model, params: RobustParams, masks: Regions):
    """Second derivatives of J_r along ``direction = (dv, dpsi)``.

    Returns ``(along_psi, along_v)``:
    ``<(y - yd), y''>_{O_d} + |y'|^2_{O_d} - gamma^2 |dpsi|^2`` and the v analogue
    with ``+ ell^2 |dv|^2_O``.
    """
    dv, dpsi = direction
    grid = v.grid
    zero = grid.zeros()
    y = solve_state(h, v, psi, y0, model, masks)
    misfit = y - yd

    def second_variation(d_v, d_psi):
        if isinstance(model, Nonlinearity):
            yp = solve_linearized_first(model, y, d_v, d_psi, masks.O)
            ypp = solve_linearized_second(model, y, yp, yp)
            curvature_term = inner_product_Q(misfit, ypp, masks.O_d)
        else:
            yp = solve_forward_linear(model, d_v.masked(masks.O) + d_psi, np.zeros(grid.n_interior))
            curvature_term = 0.0
        return curvature_term + inner_product_Q(yp, yp, masks.O_d)

    along_psi = second_variation(zero, dpsi) - params.gamma**2 * inner_product_Q(dpsi, dpsi)
    along_v = second_variation(dv, zero) + params.ell**2 * inner_product_Q(dv, dv, masks.O)
    return along_psi, along_v


def solve_saddle_ascent_descent(
    h,
    y0,
    yd,
    model,
    params: RobustParams,
    masks: Regions,
    step_v: float | None = None,
    step_psi: float | None = None,
    tol: float = 1e-10,
    max_iters: int = 500,
    v0: SpaceTimeField | None = None,
    psi0: SpaceTimeField | None = None,
) -> SaddleSolution:
    """Simultaneous gradient descent in v and ascent in psi.

    Default steps are ``1/(ell^2 + C1)`` and ``1/gamma^2`` where ``C1`` is the
    tracking-term curvature measured along the first v-gradient.  When the
    stationarity grows for 5 consecutive iterations both steps are halved,
    unless the functional is not concave along the psi step, in which case the
    run stops with the ``gamma-too-small`` flag.
    """
    grid = h.grid
    v = grid.zeros() if v0 is None else v0.masked(masks.O)
    psi = grid.zeros() if psi0 is None else psi0
    y, q, gv, gp = state_and_gradient(v, psi, h, y0, yd, model, params, masks)
    res = max(norm_Q(gv), norm_Q(gp))
    if res <= tol:
        return _solution(v, psi, h, y0, yd, model, params, masks, "unconstrained", iterations=0)

    if step_v is None:
        c1 = 0.0
        gnorm2 = inner_product_Q(gv, gv, masks.O)
        if gnorm2 > 0:
            _, along_v = curvature_probe(v, psi, (gv, grid.zeros()), h, y0, yd, model, params, masks)
            c1 = max(0.0, along_v / gnorm2 - params.ell**2)
        step_v = 1.0 / (params.ell**2 + c1)
    if step_psi is None:
        step_psi = 1.0 / params.gamma**2
    if step_v <= 0 or step_psi <= 0:
        raise ValueError("step sizes must be positive")

    best = (res, v, psi)
    history = [res]
    growth = 0
    flags = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        v_new = v.values - step_v * gv.values
        psi_new = psi.values + step_psi * gp.values
        if not (np.all(np.isfinite(v_new)) and np.all(np.isfinite(psi_new))):
            flags.append("non-finite iterate")
            break
        v, psi = SpaceTimeField(grid, v_new), SpaceTimeField(grid, psi_new)
        y, q, gv, gp = state_and_gradient(v, psi, h, y0, yd, model, params, masks)
        res = max(norm_Q(gv), norm_Q(gp))
        history.append(res)
        if res < best[0]:
            best = (res, v, psi)
        if res <= tol:
            converged = True
            break
        growth = growth + 1 if res > history[-2] else 0
        if growth >= 5:
            along_psi, _ = curvature_probe(v, psi, (grid.zeros(), gp), h, y0, yd, model, params, masks)
            if along_psi >= 0:
                flags.append(GAMMA_TOO_SMALL)
                break
            step_v *= 0.5
            step_psi *= 0.5
            growth = 0
    _, v_best, psi_best = best
    sol = _solution(v_best, psi_best, h, y0, yd, model, params, masks, "unconstrained", converged=converged, iterations=it, flags=flags)
    return sol


def vi_slacks(sol_v, sol_psi, q, params: RobustParams, box: AdmissibleBox, masks: Regions, rng=None, n_random: int = 20):
    """Worst slack of the two variational inequalities over box-vertex and random feasible probes.

    Returns ``(min over probes of <q + ell^2 v_bar, v - v_bar>_O,
    min over probes of -<q - gamma^2 psi_bar, psi - psi_bar>_Q)``; both must be >= 0.
    """
    grid = q.grid
    rng = np.random.default_rng(0) if rng is None else rng
    gv = SpaceTimeField(grid, q.values + params.ell**2 * sol_v.values)
    gp = SpaceTimeField(grid, q.values - params.gamma**2 * sol_psi.values)

    def finite(lo, hi):
        # unbounded sides are probed at a finite distance
        span = max(1.0, np.max(np.abs(sol_v.values)), np.max(np.abs(sol_psi.values)))
        return (lo if np.isfinite(lo) else -10 * span, hi if np.isfinite(hi) else 10 * span)

    v_lo, v_hi = finite(*box.E1)
    p_lo, p_hi = finite(*box.E2)
    v_probes = [np.full(grid.shape, v_lo), np.full(grid.shape, v_hi)]
    p_probes = [np.full(grid.shape, p_lo), np.full(grid.shape, p_hi)]
    for _ in range(n_random):
        v_probes.append(rng.uniform(v_lo, v_hi, grid.shape))
        p_probes.append(rng.uniform(p_lo, p_hi, grid.shape))
    slack_v = min(inner_product_Q(gv, SpaceTimeField(grid, pv) - sol_v, masks.O) for pv in v_probes)
    slack_p = min(-inner_product_Q(gp, SpaceTimeField(grid, pp) - sol_psi) for pp in p_probes)
    return slack_v, slack_p


def solve_saddle_projected(
    h,
    y0,
    yd,
    a: Potential,
    params: RobustParams,
    box: AdmissibleBox,
    masks: Regions,
    tol: float = 1e-13,
    max_iters: int = 500,
    step_v: float | None = None,
    step_psi: float | None = None,
    vi_tol: float = 1e-9,
    n_probes: int = 20,
    seed: int = 0,
) -> SaddleSolution:
    """Projected ascent-descent for box-constrained (v, psi); linear dynamics only.

    Steps default to ``1/ell^2`` and ``1/gamma^2``.  After convergence both
    variational inequalities are checked against box vertices and random
    feasible points.
    """
    if isinstance(a, Nonlinearity):
        raise TypeError("the projected follower problem is only posed for linear dynamics")
    grid = h.grid
    step_v = 1.0 / params.ell**2 if step_v is None else step_v
    step_psi = 1.0 / params.gamma**2 if step_psi is None else step_psi
    chi_O = masks.O.indicator
    v = grid.zeros()
    psi = grid.zeros()
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        _, _, gv, gp = state_and_gradient(v, psi, h, y0, yd, a, params, masks)
        v_new = SpaceTimeField(grid, chi_O * np.clip(v.values - step_v * gv.values, *box.E1))
        psi_new = SpaceTimeField(grid, np.clip(psi.values + step_psi * gp.values, *box.E2))
        change = max(np.max(np.abs(v_new.values - v.values)), np.max(np.abs(psi_new.values - psi.values)))
        v, psi = v_new, psi_new
        if change <= tol:
            converged = True
            break
    sol = _solution(v, psi, h, y0, yd, a, params, masks, "projected", converged=converged, iterations=it)
    slack_v, slack_p = vi_slacks(v, psi, sol.q, params, box, masks, np.random.default_rng(seed), n_probes)
    sol.vi_slack_v, sol.vi_slack_psi = slack_v, slack_p
    if min(slack_v, slack_p) < -vi_tol:
        sol.flags.append(f"variational inequality violated (worst slack {min(slack_v, slack_p):.3e})")
        sol.converged = False
    return sol


def solve_projected_follower_system(a: Potential, h, y0, yd, params: RobustParams, box: AdmissibleBox, masks: Regions, tol: float = 1e-13, max_sweeps: int = DEFAULT_MAX_SWEEPS):
    """Coupled system with the projected response ``Pi_E1(-q/ell^2) chi_O + Pi_E2(q/gamma^2)``."""
    grid = h.grid
    chi_O = masks.O.indicator

    def response(q):
        vals = chi_O * np.clip(-q.values / params.ell**2, *box.E1) + np.clip(q.values / params.gamma**2, *box.E2)
        return SpaceTimeField(grid, vals)

    return solve_optimality_response(a, h, y0, yd, masks, response, tol=tol, max_sweeps=max_sweeps)
