"""Invariant suite run by the ``check`` subcommand.

Each check builds its own small instance from the problem's regions and weights on
the requested grid, and compares two independent computations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .carleman import default_weights, observability_ratio
from .coupled import RobustParams, solve_adjoint_pair, solve_monolithic, solve_optimality_system
from .fixed_point import g_of
from .follower import (
    AdmissibleBox,
    eval_Jr,
    grad_Jr,
    solve_saddle_ascent_descent,
    solve_saddle_direct,
    solve_saddle_projected,
    solve_state,
)
from .leader import LeaderProblem, eval_F_eps, grad_F_eps
from .mesh import SpaceTimeField, inner_product_Omega, inner_product_Q, make_grid, make_regions, norm_Q
from .pde import Nonlinearity, Potential, solve_backward_linear, solve_forward_linear


@dataclass
class CheckResult:
    name: str
    scale: str
    passed: bool
    value: float
    threshold: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  [{self.scale}] {self.name}: {self.value:.3e} (threshold {self.threshold:.1e})"


def _rel(a, b):
    den = max(abs(a), abs(b), 1e-300)
    return abs(a - b) / den


class _Instance:
    def __init__(self, spec, n_cells, n_steps, rng):
        g = spec.grid
        self.grid = make_grid(g["x_min"], g["x_max"], n_cells, g["T"], n_steps)
        self.masks = make_regions(self.grid, spec.regions["omega"], spec.regions["O"], spec.regions["O_d"])
        self.params = spec.params()
        self.rng = rng
        self.scale = f"{n_cells}x{n_steps}"
        self.spec = spec

    def field(self, mask=None):
        f = SpaceTimeField(self.grid, self.rng.standard_normal(self.grid.shape))
        return f if mask is None else f.masked(mask)

    def vector(self):
        return self.rng.standard_normal(self.grid.n_interior)

    def potential(self):
        return Potential.from_field(SpaceTimeField(self.grid, 0.5 * self.rng.standard_normal(self.grid.shape)))


def check_transpose_duality(inst):
    a = inst.potential()
    worst = 0.0
    for _ in range(10):
        y0, phiT = inst.vector(), inst.vector()
        y = solve_forward_linear(a, inst.grid.zeros(), y0)
        phi = solve_backward_linear(a, inst.grid.zeros(), phiT)
        lhs = inner_product_Omega(y.final, phiT, grid=inst.grid)
        rhs = inner_product_Omega(y0, phi.start, grid=inst.grid)
        worst = max(worst, _rel(lhs, rhs))
    return "forward/backward transpose duality", worst, 1e-12


def check_coupled_duality(inst):
    a, c = inst.potential(), inst.potential()
    m, p, grid = inst.masks, inst.params, inst.grid
    worst = 0.0
    for _ in range(10):
        h, yd, y0, phiT = inst.field(m.omega), inst.field(m.O_d), inst.vector(), inst.vector()
        y, _, _ = solve_optimality_system(a, c, h, y0, yd, p, m, tol=1e-14)
        phi, theta, _ = solve_adjoint_pair(a, c, phiT, p, m, tol=1e-14)
        lhs = inner_product_Omega(y.final, phiT, grid=grid)
        rhs = inner_product_Omega(y0, phi.start, grid=grid) + inner_product_Q(h, phi, m.omega) - inner_product_Q(yd, theta, m.O_d)
        worst = max(worst, _rel(lhs, rhs))
    return "coupled duality identity", worst, 1e-10


def check_monolithic(inst):
    a, c = inst.potential(), inst.potential()
    m, p = inst.masks, inst.params
    h, yd, y0, phiT = inst.field(m.omega), inst.field(m.O_d), inst.vector(), inst.vector()
    y, q, _ = solve_optimality_system(a, c, h, y0, yd, p, m, tol=1e-14)
    ym, qm, _ = solve_monolithic("optimality", a, c, p, m, h=h, y0=y0, yd=yd)
    phi, theta, _ = solve_adjoint_pair(a, c, phiT, p, m, tol=1e-14)
    phim, thetam, _ = solve_monolithic("adjoint", a, c, p, m, phiT=phiT)
    err = max(
        norm_Q(y - ym) / norm_Q(ym),
        norm_Q(q - qm) / norm_Q(qm),
        norm_Q(phi - phim) / norm_Q(phim),
        norm_Q(theta - thetam) / norm_Q(thetam),
    )
    return "sweep vs monolithic solve", err, 1e-8


def check_follower_gradient(inst, model, threshold):
    m, p, grid = inst.masks, inst.params, inst.grid
    h, yd, y0 = inst.field(m.omega), inst.field(m.O_d), inst.vector()
    v, psi = inst.field(m.O), inst.field()
    gv, gp = grad_Jr(v, psi, h, y0, yd, model, p, m)
    step = 1e-5
    worst = 0.0

    def J(vv, pp):
        return eval_Jr(solve_state(h, vv, pp, y0, model, m), vv, pp, yd, p, m)

    for _ in range(5):
        dv, dp = inst.field(m.O), inst.field()
        fd = (J(v + dv * step, psi + dp * step) - J(v - dv * step, psi - dp * step)) / (2 * step)
        exact = inner_product_Q(gv, dv, m.O) + inner_product_Q(gp, dp)
        worst = max(worst, _rel(fd, exact))
    name = "robust functional gradient vs finite differences" + (" (tanh)" if isinstance(model, Nonlinearity) else "")
    return name, worst, threshold


def check_leader_gradient(inst):
    m, p, grid = inst.masks, inst.params, inst.grid
    a = c = Potential.zero(grid)
    y0, yd = inst.vector(), inst.field(m.O_d)
    u = inst.vector()
    g = grad_F_eps(u, y0, yd, a, c, p, m, 1e-2)
    step = 1e-5
    worst = 0.0
    for _ in range(5):
        d = inst.vector()
        fd = (eval_F_eps(u + step * d, y0, yd, a, c, p, m, 1e-2) - eval_F_eps(u - step * d, y0, yd, a, c, p, m, 1e-2)) / (2 * step)
        worst = max(worst, _rel(fd, inner_product_Omega(g, d, grid=grid)))
    return "dual functional gradient vs finite differences", worst, 1e-7


def check_hessian_symmetry(inst):
    prob = LeaderProblem(inst.potential(), inst.potential(), inst.params, inst.masks)
    u, w = inst.vector(), inst.vector()
    grid = inst.grid
    lhs = inner_product_Omega(prob.hessian_vector(u, 1e-3), w, grid=grid)
    rhs = inner_product_Omega(u, prob.hessian_vector(w, 1e-3), grid=grid)
    return "Hessian-vector symmetry", _rel(lhs, rhs), 1e-11


def check_saddle_agreement(inst):
    m, p, grid = inst.masks, inst.params, inst.grid
    a = Potential.zero(grid)
    h, yd, y0 = inst.field(m.omega), inst.field(m.O_d), inst.vector()
    direct = solve_saddle_direct(h, y0, yd, a, p, m)
    ad = solve_saddle_ascent_descent(h, y0, yd, a, p, m, tol=1e-11)
    err = max(norm_Q(direct.v_bar - ad.v_bar), norm_Q(direct.psi_bar - ad.psi_bar))
    return "direct vs ascent-descent saddle", err, 1e-6


def check_projection_identity(inst):
    m, p, grid = inst.masks, inst.params, inst.grid
    a = Potential.zero(grid)
    h, yd, y0 = inst.field(m.omega), inst.field(m.O_d), inst.vector()
    free = solve_saddle_direct(h, y0, yd, a, p, m)
    bound_v = 0.5 * np.max(np.abs(free.v_bar.values))
    bound_p = 0.5 * np.max(np.abs(free.psi_bar.values))
    box = AdmissibleBox(-bound_v, bound_v, -bound_p, bound_p)
    sol = solve_saddle_projected(h, y0, yd, a, p, box, m)
    q = sol.q.values
    err = max(
        np.max(np.abs(sol.v_bar.values - m.O.indicator * np.clip(-q / p.ell**2, *box.E1))),
        np.max(np.abs(sol.psi_bar.values - np.clip(q / p.gamma**2, *box.E2))),
    )
    return "projected saddle projection identity", float(err), 1e-12


def check_weights(inst):
    w = default_weights(inst.grid, inst.spec.regions["omega"], inst.spec.regions["O_d"])
    log_rho = w.log_rho[:-1]
    drops = float(max(0.0, -np.min(np.diff(log_rho))))
    return "rho nondecreasing (largest drop in log rho)", drops, 1e-12


def check_observability_scaling(inst):
    w = default_weights(inst.grid, inst.spec.regions["omega"], inst.spec.regions["O_d"])
    a, c = inst.potential(), inst.potential()
    phiT = inst.vector()
    r1 = observability_ratio(phiT, a, c, inst.params, inst.masks, w)
    r2 = observability_ratio(7.5 * phiT, a, c, inst.params, inst.masks, w)
    return "observability ratio scale invariance", _rel(r1.ratio, r2.ratio), 1e-12


def check_factorization(inst):
    f = Nonlinearity.tanh(1.0)
    s = np.linspace(-5, 5, 11)
    return "g(s) s = f(s) factorization", float(np.max(np.abs(g_of(f, s, 2000) * s - f.f(s)))), 1e-10


def run_suite(spec, scales=((16, 16), (32, 32)), seed: int = 0) -> list:
    results = []
    for n_cells, n_steps in scales:
        inst = _Instance(spec, n_cells, n_steps, np.random.default_rng(seed))
        checks = [
            lambda: check_transpose_duality(inst),
            lambda: check_coupled_duality(inst),
            lambda: check_follower_gradient(inst, Potential.zero(inst.grid), 1e-6),
            lambda: check_follower_gradient(inst, Nonlinearity.tanh(1.0), 1e-5),
            lambda: check_leader_gradient(inst),
            lambda: check_hessian_symmetry(inst),
            lambda: check_saddle_agreement(inst),
            lambda: check_projection_identity(inst),
            lambda: check_weights(inst),
            lambda: check_observability_scaling(inst),
            lambda: check_factorization(inst),
        ]
        if 2 * n_cells * n_steps <= 20_000:
            checks.insert(2, lambda: check_monolithic(inst))
        for check in checks:
            name, value, threshold = check()
            results.append(CheckResult(name, inst.scale, bool(value <= threshold), float(value), threshold))
    return results
