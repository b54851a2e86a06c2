"""Time-stepping kernels for the 1D heat equation with a potential.

Forward scheme, on each interval (t_n, t_{n+1}) with midpoint state
``ybar = (y^n + y^{n+1}) / 2``::

    (y^{n+1} - y^n) / dt + A ybar + m_n * ybar = s_n

where ``A`` is the Dirichlet finite-difference ``-d^2/dx^2``, ``m_n`` the
potential on the interval and ``s_n`` the interval source (the average of the
nodal source values).  The backward solver is the exact transpose of this map
with respect to the trapezoid-in-time inner product, which makes

    <y(T), phi_T> - <y_0, phi(0)> = <s, phi>_Q - <r, y>_Q

hold to rounding error.  The backward trajectory is the nodal representation
that pairs with nodal sources under that quadrature; the t = 0 trace paired
with ``y_0`` is stored separately in ``SpaceTimeField.initial``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg.lapack import dgttrf, dgttrs

from .errors import ConvergenceError, GridMismatchError
from .mesh import Grid, RegionMask, SpaceTimeField


# --------------------------------------------------------------------------- nonlinearity


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    """A globally Lipschitz C^2 function with f(0) = 0.

    ``lipschitz_bound`` bounds both |f'| and |f''|; it is checked on a probe
    grid at construction.
    """

    f: Callable[[np.ndarray], np.ndarray]
    f_prime: Callable[[np.ndarray], np.ndarray]
    f_double_prime: Callable[[np.ndarray], np.ndarray]
    lipschitz_bound: float
    name: str = "custom"
    is_linear: bool = False

    def __post_init__(self):
        probe = np.concatenate([np.linspace(-50.0, 50.0, 2001), np.linspace(-3.0, 3.0, 601)])
        if abs(float(self.f(np.array(0.0)))) > 1e-14:
            raise ValueError(f"nonlinearity {self.name}: f(0) must vanish")
        slack = 1e-12 * max(1.0, self.lipschitz_bound)
        if np.max(np.abs(self.f_prime(probe))) > self.lipschitz_bound + slack:
            raise ValueError(f"nonlinearity {self.name}: |f'| exceeds lipschitz_bound={self.lipschitz_bound}")
        if np.max(np.abs(self.f_double_prime(probe))) > self.lipschitz_bound + slack:
            raise ValueError(f"nonlinearity {self.name}: |f''| exceeds lipschitz_bound={self.lipschitz_bound}")

    @classmethod
    def linear(cls, a: float) -> "Nonlinearity":
        a = float(a)
        return cls(
            f=lambda s: a * np.asarray(s, dtype=float),
            f_prime=lambda s: np.full_like(np.asarray(s, dtype=float), a),
            f_double_prime=lambda s: np.zeros_like(np.asarray(s, dtype=float)),
            lipschitz_bound=abs(a),
            name=f"linear({a:g})",
            is_linear=True,
        )

    @classmethod
    def tanh(cls, scale: float = 1.0) -> "Nonlinearity":
        scale = float(scale)

        def fp(s):
            return scale / np.cosh(s) ** 2

        def fpp(s):
            s = np.asarray(s, dtype=float)
            return -2.0 * scale * np.tanh(s) / np.cosh(s) ** 2

        # max |f''| = 4/(3 sqrt 3) |scale| < |scale|
        return cls(lambda s: scale * np.tanh(s), fp, fpp, abs(scale), name=f"tanh({scale:g})")

    @classmethod
    def from_table(cls, s_nodes, f_values) -> "Nonlinearity":
        """Cubic spline through tabulated values, extended linearly outside the table.

        The table must contain s = 0 with f(0) = 0.
        """
        s_nodes = np.asarray(s_nodes, dtype=float)
        f_values = np.asarray(f_values, dtype=float)
        order = np.argsort(s_nodes)
        s_nodes, f_values = s_nodes[order], f_values[order]
        spline = CubicSpline(s_nodes, f_values, bc_type="natural")
        d1, d2 = spline.derivative(1), spline.derivative(2)
        lo, hi = s_nodes[0], s_nodes[-1]
        slope_lo, slope_hi = float(d1(lo)), float(d1(hi))

        def f(s):
            s = np.asarray(s, dtype=float)
            inside = spline(np.clip(s, lo, hi))
            return np.where(s < lo, f_values[0] + slope_lo * (s - lo), np.where(s > hi, f_values[-1] + slope_hi * (s - hi), inside))

        def fp(s):
            s = np.asarray(s, dtype=float)
            return d1(np.clip(s, lo, hi))

        def fpp(s):
            s = np.asarray(s, dtype=float)
            return np.where((s < lo) | (s > hi), 0.0, d2(np.clip(s, lo, hi)))

        fine = np.linspace(lo, hi, 20001)
        bound = float(max(np.max(np.abs(d1(fine))), np.max(np.abs(d2(fine)))))
        return cls(f, fp, fpp, bound * (1.0 + 1e-9), name="table")


# --------------------------------------------------------------------------- potentials


@dataclass(frozen=True, eq=False)
class Potential:
    """Zeroth-order coefficient of the heat operator.

    ``mid`` holds one value per time interval and interior node (shape
    ``(n_steps, n_interior)``); that is what the scheme uses.  When built from
    nodal values those are kept in ``values`` and ``mid`` is their time average.
    """

    grid: Grid
    mid: np.ndarray
    values: SpaceTimeField | None = None

    def __post_init__(self):
        mid = np.asarray(self.mid, dtype=float)
        if mid.shape != (self.grid.n_steps, self.grid.n_interior):
            raise GridMismatchError(f"potential shape {mid.shape} does not match grid intervals")
        if not np.all(np.isfinite(mid)):
            raise ValueError("potential contains non-finite values")
        object.__setattr__(self, "mid", mid)

    @classmethod
    def from_field(cls, values: SpaceTimeField) -> "Potential":
        v = values.values
        return cls(values.grid, 0.5 * (v[1:] + v[:-1]), values)

    @classmethod
    def constant(cls, grid: Grid, a: float = 0.0) -> "Potential":
        return cls.from_field(SpaceTimeField(grid, np.full(grid.shape, float(a))))

    @classmethod
    def zero(cls, grid: Grid) -> "Potential":
        return cls.constant(grid, 0.0)

    @property
    def sup_norm(self) -> float:
        if self.values is not None:
            return float(np.max(np.abs(self.values.values)))
        return float(np.max(np.abs(self.mid)))

    @cached_property
    def stepper(self) -> "_Stepper":
        return _Stepper(self.grid, self.mid)


class _Stepper:
    """Factorized implicit matrices ``P_n = I/dt + (A + diag m_n)/2`` for every interval."""

    def __init__(self, grid: Grid, mid: np.ndarray):
        self.grid = grid
        self.mid = mid
        n = grid.n_interior
        self.inv_dx2 = 1.0 / grid.dx**2
        self.inv_dt = 1.0 / grid.dt
        off = np.full(n - 1, -0.5 * self.inv_dx2)
        constant = bool(np.all(mid == mid[0]))
        rows = [mid[0]] if constant else list(mid)
        factors = []
        for m in rows:
            diag = self.inv_dt + 0.5 * (2.0 * self.inv_dx2 + m)
            dl, d, du, du2, ipiv, info = dgttrf(off.copy(), diag, off.copy())
            if info != 0:
                raise np.linalg.LinAlgError(f"singular step matrix (info={info}); check dt/dx and the potential")
            factors.append((dl, d, du, du2, ipiv))
        self.factors = factors if not constant else factors * grid.n_steps

    def laplacian(self, u: np.ndarray) -> np.ndarray:
        """Apply ``A = -d^2/dx^2`` with zero Dirichlet data."""
        out = 2.0 * u
        out[1:] -= u[:-1]
        out[:-1] -= u[1:]
        return out * self.inv_dx2

    def explicit(self, n: int, u: np.ndarray) -> np.ndarray:
        """``N_n u = u/dt - (A + diag m_n) u / 2``."""
        return u * self.inv_dt - 0.5 * (self.laplacian(u) + self.mid[n] * u)

    def implicit_solve(self, n: int, rhs: np.ndarray) -> np.ndarray:
        dl, d, du, du2, ipiv = self.factors[n]
        x, info = dgttrs(dl, d, du, du2, ipiv, rhs)
        if info != 0:
            raise np.linalg.LinAlgError(f"tridiagonal solve failed at step {n} (info={info})")
        return x


def _stepper_for(potential: Potential, grid: Grid) -> _Stepper:
    if potential.grid != grid:
        raise GridMismatchError("potential and data live on different grids")
    return potential.stepper


def nodal_to_interval(values: np.ndarray) -> np.ndarray:
    return 0.5 * (values[1:] + values[:-1])


def _check_vector(vec, grid: Grid, name: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (grid.n_interior,):
        raise GridMismatchError(f"{name} has shape {vec.shape}, expected ({grid.n_interior},)")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"{name} contains non-finite values")
    return vec


# --------------------------------------------------------------------------- linear kernels


def forward_intervals(potential: Potential, interval_source: np.ndarray, y0) -> SpaceTimeField:
    """Forward march with a source given per interval, shape ``(n_steps, n_interior)``."""
    grid = potential.grid
    step = potential.stepper
    y0 = _check_vector(y0, grid, "y0")
    if interval_source.shape != (grid.n_steps, grid.n_interior):
        raise GridMismatchError("interval source shape does not match the grid")
    y = np.empty(grid.shape)
    y[0] = y0
    for n in range(grid.n_steps):
        y[n + 1] = step.implicit_solve(n, step.explicit(n, y[n]) + interval_source[n])
    return SpaceTimeField(grid, y)


def solve_forward_linear(a: Potential, source: SpaceTimeField, y0) -> SpaceTimeField:
    """Solve ``y_t - y_xx + a y = source``, ``y(0) = y0``, zero Dirichlet data."""
    grid = source.grid
    _stepper_for(a, grid)
    return forward_intervals(a, nodal_to_interval(source.values), y0)


def solve_backward_linear(c: Potential, source: SpaceTimeField, qT) -> SpaceTimeField:
    """Solve ``-q_t - q_xx + c q = source``, ``q(T) = qT`` as the transpose of the forward scheme.

    The returned field carries the t = 0 trace in ``initial``.
    """
    grid = source.grid
    step = _stepper_for(c, grid)
    qT = _check_vector(qT, grid, "qT")
    r = source.values
    K = grid.n_steps
    mu = np.empty((K, grid.n_interior))
    mu[K - 1] = step.implicit_solve(K - 1, qT * step.inv_dt + 0.5 * r[K])
    for m in range(K - 1, 0, -1):
        mu[m - 1] = step.implicit_solve(m - 1, step.explicit(m, mu[m]) + r[m])
    q = np.empty(grid.shape)
    q[0] = mu[0]
    q[1:K] = 0.5 * (mu[1:] + mu[:-1])
    q[K] = mu[K - 1]
    initial = grid.dt * step.explicit(0, mu[0]) + 0.5 * grid.dt * r[0]
    return SpaceTimeField(grid, q, initial)


# --------------------------------------------------------------------------- semilinear


def solve_forward_semilinear(
    f: Nonlinearity,
    source: SpaceTimeField,
    y0,
    tol: float = 1e-12,
    max_inner: int = 100,
    return_iterations: bool = False,
):
    """Solve ``y_t - y_xx + f(y) = source`` with f evaluated at the interval midpoint state.

    Each implicit step is solved by Picard iteration on the f-term until the sup
    difference of successive iterates is at most ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid = source.grid
    y0 = _check_vector(y0, grid, "y0")
    step = Potential.zero(grid).stepper
    s = nodal_to_interval(source.values)
    y = np.empty(grid.shape)
    y[0] = y0
    most = 0
    for n in range(grid.n_steps):
        base = step.explicit(n, y[n]) + s[n]
        new = y[n].copy()
        for it in range(1, max_inner + 1):
            cand = step.implicit_solve(n, base - f.f(0.5 * (y[n] + new)))
            diff = np.max(np.abs(cand - new))
            new = cand
            if diff <= tol * max(1.0, np.max(np.abs(new))):
                break
        else:
            raise ConvergenceError(f"semilinear step {n} did not converge in {max_inner} Picard iterations")
        most = max(most, it)
        y[n + 1] = new
    out = SpaceTimeField(grid, y)
    return (out, most) if return_iterations else out


def midpoint_potential(func, y: SpaceTimeField) -> Potential:
    """Potential ``func(ybar)`` evaluated at the interval midpoint states of ``y``."""
    return Potential(y.grid, func(nodal_to_interval(y.values)))


def linearization_potential(f: Nonlinearity, y: SpaceTimeField) -> Potential:
    """``f'(ybar)``: the exact derivative of the discrete semilinear step."""
    return midpoint_potential(f.f_prime, y)


def solve_linearized_first(
    f: Nonlinearity, y: SpaceTimeField, v1: SpaceTimeField, psi1: SpaceTimeField, O: RegionMask
) -> SpaceTimeField:
    """Derivative of the state in direction (v1, psi1): ``w_t - w_xx + f'(y) w = v1 chi_O + psi1``, w(0) = 0."""
    source = v1.masked(O) + psi1
    return forward_intervals(linearization_potential(f, y), nodal_to_interval(source.values), np.zeros(y.grid.n_interior))


def solve_linearized_second(f: Nonlinearity, y: SpaceTimeField, w1: SpaceTimeField, w2: SpaceTimeField) -> SpaceTimeField:
    """Second derivative: ``z_t - z_xx + f'(y) z = -f''(y) w1 w2``, z(0) = 0."""
    ybar = nodal_to_interval(y.values)
    src = -f.f_double_prime(ybar) * nodal_to_interval(w1.values) * nodal_to_interval(w2.values)
    return forward_intervals(linearization_potential(f, y), src, np.zeros(y.grid.n_interior))
