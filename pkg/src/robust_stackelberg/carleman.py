"""Carleman weight functions, the weighted target norm and the empirical observability ratio.

With a bump function eta0 (positive inside, zero on the boundary, critical
points only inside a bump region B):

    alpha = (e^{4 lam |eta0|} - e^{lam (2 |eta0| + eta0)}) / (t (T - t))
    xi    =  e^{lam (2 |eta0| + eta0)} / (t (T - t))

and beta, phi_w the same with ``t (T - t)`` replaced by ``l(t)``, which equals
``T^2/4`` on [0, T/2] and ``t (T - t)`` afterwards.  ``rho(t) = exp(s beta*(t))``
with ``beta* = max_x beta``.  rho overflows double precision for any realistic
``s``, so it is carried as ``log_rho`` and only exponentiated with an explicit cap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .coupled import RobustParams, solve_adjoint_pair
from .errors import ConvergenceError, GeometryError
from .mesh import Grid, RegionMask, Regions, SpaceTimeField, inner_product_Q, norm_Omega
from .pde import Potential

LOG_MAX = np.log(np.finfo(float).max)


@dataclass(frozen=True)
class CarlemanParams:
    """Weight parameters; ``s`` must be at least the threshold ``s2(T, M, sigma2)``."""

    T: float
    s: float | None = None
    lam: float = 2.0
    sigma2: float = 1.0
    M: float = 0.0

    def __post_init__(self):
        if not (self.T > 0 and self.lam > 0 and self.sigma2 > 0 and self.M >= 0):
            raise ValueError("CarlemanParams needs T, lam, sigma2 > 0 and M >= 0")
        if self.s is None:
            object.__setattr__(self, "s", self.s2)
        if self.s < self.s2 * (1 - 1e-12):
            raise ValueError(f"s={self.s} is below the threshold s2={self.s2}")

    @property
    def s2(self) -> float:
        """``sigma2 (T + T^2 + T^2 (|a|^{2/3} + |c|^{2/3} + |a - c|^{1/2}))`` with |a|, |c| <= M."""
        T, M = self.T, self.M
        return self.sigma2 * (T + T**2 + T**2 * (2 * M ** (2 / 3) + (2 * M) ** 0.5))


# --------------------------------------------------------------------------- eta0


def _normalized(x, grid: Grid):
    return (np.asarray(x, float) - grid.x_min) / (grid.x_max - grid.x_min)


def eta0_profile(bump, grid: Grid):
    """Return ``(eta, deta)`` as callables of x for the bump centred in ``bump``.

    In the unit variable ``u`` the profile is ``u (1 - u) exp(k (u - c))`` with
    ``k = (2c - 1) / (c (1 - c))``; ``d/du log(eta) = 1/u - 1/(1-u) + k`` is
    strictly decreasing and vanishes only at ``u = c``, so the single critical
    point sits at the bump centre.  Scaled so that ``max eta = 1``.
    """
    lo, hi = bump
    if not (grid.x_min < lo < hi < grid.x_max):
        raise GeometryError(f"bump region [{lo}, {hi}] must lie strictly inside ({grid.x_min}, {grid.x_max})")
    c = float(_normalized(0.5 * (lo + hi), grid))
    k = (2 * c - 1) / (c * (1 - c))
    peak = c * (1 - c)
    length = grid.x_max - grid.x_min

    def eta(x):
        u = _normalized(x, grid)
        return u * (1 - u) * np.exp(k * (u - c)) / peak

    def deta(x):
        u = _normalized(x, grid)
        return (1 - 2 * u + k * u * (1 - u)) * np.exp(k * (u - c)) / (peak * length)

    return eta, deta


def build_eta0(grid: Grid, bump) -> np.ndarray:
    """eta0 at the interior nodes (zero at the implicit boundary nodes)."""
    eta, _ = eta0_profile(bump, grid)
    return eta(grid.x)


def default_bump(omega) -> tuple[float, float]:
    """Middle third of the interval ``omega``."""
    lo, hi = omega
    third = (hi - lo) / 3
    return (lo + third, hi - third)


# --------------------------------------------------------------------------- weights


@dataclass(frozen=True, eq=False)
class CarlemanWeights:
    """Weights on the grid nodes; NaN marks excluded time levels.

    ``alpha``, ``xi`` are undefined at t = 0 and t = T; ``beta``, ``phi_w``,
    ``beta_star``, ``phi_star`` at t = T.  ``rho`` is ``exp(log_rho)`` capped at
    the largest double, with ``rho_capped`` marking capped entries.
    """

    grid: Grid
    params: CarlemanParams
    eta0: np.ndarray
    l: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    beta: np.ndarray
    phi_w: np.ndarray
    beta_star: np.ndarray
    phi_star: np.ndarray
    log_rho: np.ndarray
    rho: np.ndarray
    rho_capped: np.ndarray
    overflow: bool

    @property
    def log_rho_inv2(self) -> np.ndarray:
        """``log(rho^-2)``; ``-inf`` at t = T where rho is infinite."""
        return -2.0 * self.log_rho


def l_of_t(t, T: float) -> np.ndarray:
    t = np.asarray(t, float)
    return np.where(t <= T / 2, T**2 / 4, t * (T - t))


def _capped_exp(log_values):
    with np.errstate(over="ignore", invalid="ignore"):
        capped = np.isfinite(log_values) & (log_values > LOG_MAX)
        out = np.exp(np.minimum(log_values, LOG_MAX))
    return out, capped


def build_weights(eta0: np.ndarray, grid: Grid, params: CarlemanParams) -> CarlemanWeights:
    eta0 = np.asarray(eta0, float)
    if eta0.shape != (grid.n_interior,):
        raise ValueError("eta0 must be given at the interior nodes")
    if abs(params.T - grid.T) > 1e-12 * grid.T:
        raise ValueError("CarlemanParams.T differs from the grid horizon")
    lam, s, T = params.lam, params.s, grid.T
    t = grid.t
    eta_all = np.concatenate([[0.0], eta0, [0.0]])  # closure of the domain for max/min
    norm = np.max(np.abs(eta_all))
    with np.errstate(over="ignore"):
        e_hi = np.exp(4 * lam * norm)
        e_x = np.exp(lam * (2 * norm + eta_all))
    num_alpha = e_hi - e_x
    overflow = not (np.isfinite(e_hi) and np.all(np.isfinite(e_x)))

    tt = t[:, None]
    inner = (t > 0) & (t < T)
    before_T = t < T
    with np.errstate(divide="ignore", invalid="ignore"):
        den_a = np.where(inner[:, None], tt * (T - tt), np.nan)
        ell = l_of_t(t, T)
        den_b = np.where(before_T[:, None], ell[:, None], np.nan)
        alpha_all = num_alpha[None, :] / den_a
        xi_all = e_x[None, :] / den_a
        beta_all = num_alpha[None, :] / den_b
        phi_all = e_x[None, :] / den_b
    beta_star = np.where(before_T, np.max(beta_all, axis=1) if np.all(np.isfinite(num_alpha)) else np.nan, np.nan)
    phi_star = np.where(before_T, np.min(phi_all, axis=1) if np.all(np.isfinite(e_x)) else np.nan, np.nan)
    beta_star[~before_T] = np.nan
    phi_star[~before_T] = np.nan
    log_rho = np.where(before_T, s * beta_star, np.inf)
    rho, capped = _capped_exp(log_rho)
    rho = np.where(np.isinf(log_rho), np.inf, rho)
    interior = slice(1, -1)
    return CarlemanWeights(
        grid=grid,
        params=params,
        eta0=eta0,
        l=ell,
        alpha=alpha_all[:, interior],
        xi=xi_all[:, interior],
        beta=beta_all[:, interior],
        phi_w=phi_all[:, interior],
        beta_star=beta_star,
        phi_star=phi_star,
        log_rho=log_rho,
        rho=rho,
        rho_capped=capped,
        overflow=overflow,
    )


def default_weights(grid: Grid, omega, O_d=None, M: float = 0.0, **kwargs) -> CarlemanWeights:
    """Weights with the bump in the middle third of ``omega`` (or of omega ∩ O_d when given)."""
    region = omega
    if O_d is not None:
        lo, hi = max(omega[0], O_d[0]), min(omega[1], O_d[1])
        if lo < hi:
            region = (lo, hi)
    eta0 = build_eta0(grid, default_bump(region))
    return build_weights(eta0, grid, CarlemanParams(T=grid.T, M=M, **kwargs))


# --------------------------------------------------------------------------- weighted target norm


@dataclass
class WeightedNorm:
    """``(iint_{O_d x (0,T)} rho^2 |yd|^2)^{1/2}`` with its logarithm and admissibility flags."""

    value: float
    log_value: float
    divergent: bool
    capped: bool
    tail_log_values: tuple = ()


def _log_sum(log_terms):
    finite = log_terms[np.isfinite(log_terms)]
    return float(logsumexp(finite)) if finite.size else -np.inf


def weighted_target_norm(yd, weights: CarlemanWeights, mask: RegionMask | None = None, levels: int = 8, growth_tol: float = 1e-6) -> WeightedNorm:
    """Quadrature of ``rho^2 |yd|^2`` over O_d x (0,T), computed in log space.

    ``yd`` is a SpaceTimeField or a callable ``yd(x, t)``.  The t = T node,
    where rho is infinite, is excluded.  For a callable, the divergence
    indicator refines the last time cell geometrically toward T and flags the
    norm when the tail contribution keeps growing; for a sampled field it flags
    a weighted integrand that is still increasing over the last three time
    levels before T.
    """
    grid = weights.grid
    chi = np.ones(grid.n_interior) if mask is None else mask.indicator
    w = grid.time_weights().copy()
    w[-2] = grid.dt  # the last interval is closed at its left end only
    log_rho = weights.log_rho
    field = yd if isinstance(yd, SpaceTimeField) else grid.field(yd)

    def log_slice_mass(values_row):
        mass = grid.dx * np.sum(chi * values_row**2)
        return np.log(mass) if mass > 0 else -np.inf

    log_mass = np.array([log_slice_mass(row) for row in field.values[:-1]])
    log_integrand = 2 * log_rho[:-1] + log_mass
    total = _log_sum(log_integrand + np.log(w[:-1]))
    tail_values = ()
    if isinstance(yd, SpaceTimeField):
        tail = log_integrand[-3:]
        divergent = bool(np.all(np.isfinite(tail)) and np.all(np.diff(tail) > 0))
    else:
        divergent, tail_values = _refinement_probe(yd, weights, chi, levels, growth_tol)
        total = np.logaddexp(total, tail_values[-1]) if tail_values else total
    log_value = 0.5 * total
    capped = bool(np.isfinite(log_value) and log_value > LOG_MAX)
    value = float(np.exp(min(log_value, LOG_MAX))) if np.isfinite(log_value) else 0.0
    if divergent:
        value = float("inf")
    return WeightedNorm(value, float(log_value), divergent, capped, tuple(tail_values))


def _refinement_probe(yd_func, weights: CarlemanWeights, chi, levels: int, growth_tol: float):
    """Log of the weighted integral over ``[T - dt, T - dt 2^-k]`` for k = 1..levels.

    Divergent when the tail is still growing by a relative amount above
    ``growth_tol`` between the last two refinements.
    """
    grid = weights.grid
    T, dt = grid.T, grid.dt
    p = weights.params
    x = grid.x
    norm = max(np.max(weights.eta0), 0.0)
    numer = np.exp(4 * p.lam * norm) - np.exp(2 * p.lam * norm)  # max over the closure (eta0 = 0 on the boundary)
    # nested geometric nodes T - dt 2^(-j/16); tail k ends at node 16 k
    per_halving = 16
    t = T - dt * 2.0 ** (-np.arange(per_halving * levels + 1) / per_halving)
    log_rho = p.s * numer / l_of_t(t, T)
    yv = np.broadcast_to(np.asarray(yd_func(x[None, :], t[:, None]), float), (t.size, x.size))
    mass = grid.dx * np.sum(chi * yv**2, axis=1)
    with np.errstate(divide="ignore"):
        log_f = 2 * log_rho + np.log(mass)
    log_cells = np.logaddexp(log_f[:-1], log_f[1:]) + np.log(0.5 * np.diff(t))
    running = np.logaddexp.accumulate(log_cells)
    tails = [float(running[per_halving * k - 1]) for k in range(1, levels + 1)]
    finite = [v for v in tails if np.isfinite(v)]
    if len(finite) < 2:
        return False, tails
    growth = finite[-1] - finite[-2]  # log of the ratio of successive tails
    return bool(growth > np.log1p(growth_tol)), tails


# --------------------------------------------------------------------------- observability


@dataclass
class ObservabilityRatio:
    ratio: float
    lhs: float
    rhs: float
    defined: bool


def observability_ratio(phiT, a: Potential, c: Potential, params: RobustParams, masks: Regions, weights: CarlemanWeights, tol: float = 1e-13) -> ObservabilityRatio:
    """``(|phi(0)|^2 + iint rho^-2 |theta|^2) / iint_{omega x (0,T)} |phi|^2``; undefined when the denominator vanishes."""
    phi, theta, report = solve_adjoint_pair(a, c, phiT, params, masks, tol=tol)
    if not report.converged:
        raise ConvergenceError("adjoint pair did not converge", report)
    grid = phi.grid
    rho_inv2 = np.exp(weights.log_rho_inv2)  # 0 at t = T
    weighted_theta = SpaceTimeField(grid, theta.values * np.sqrt(rho_inv2)[:, None])
    lhs = norm_Omega(phi.start, grid) ** 2 + inner_product_Q(weighted_theta, weighted_theta)
    rhs = inner_product_Q(phi, phi, masks.omega)
    if rhs == 0.0:
        return ObservabilityRatio(float("nan"), lhs, rhs, False)
    return ObservabilityRatio(lhs / rhs, lhs, rhs, True)


def empirical_observability_constant(a, c, params, masks, weights, n_samples: int = 100, rng=None):
    """Max observability ratio over Gaussian ``phiT``; returns ``(C_hat, ratios)``."""
    rng = np.random.default_rng(0) if rng is None else rng
    grid = a.grid
    ratios = []
    for _ in range(n_samples):
        r = observability_ratio(rng.standard_normal(grid.n_interior), a, c, params, masks, weights)
        if r.defined:
            ratios.append(r.ratio)
    ratios = np.sort(np.array(ratios))
    return (float(ratios.max()) if ratios.size else float("nan")), ratios
