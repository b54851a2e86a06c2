"""Uniform space-time grid on (x_min, x_max) x (0, T), region masks and quadrature.

Fields store interior nodes only; the homogeneous Dirichlet boundary values are
implicit.  Spatial integrals use the rectangle rule on interior nodes and time
integrals the trapezoid rule, so ``<f, g>_Q = sum_m w_m * dx * sum_i f[m, i] g[m, i]``
with ``w_0 = w_K = dt/2`` and ``w_m = dt`` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GeometryError, GridMismatchError

REGION_NAMES = ("omega", "O", "O_d")


@dataclass(frozen=True)
class Grid:
    x_min: float
    x_max: float
    n_cells: int
    T: float
    n_steps: int

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_interior(self) -> int:
        return self.n_cells - 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_steps + 1, self.n_cells - 1)

    @property
    def x(self) -> np.ndarray:
        """Interior node coordinates."""
        return self.x_min + self.dx * np.arange(1, self.n_cells)

    @property
    def x_all(self) -> np.ndarray:
        """Node coordinates including both boundary nodes."""
        return self.x_min + self.dx * np.arange(self.n_cells + 1)

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def time_weights(self) -> np.ndarray:
        w = np.full(self.n_steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def zeros(self) -> "SpaceTimeField":
        return SpaceTimeField(self, np.zeros(self.shape))

    def field(self, func) -> "SpaceTimeField":
        """Sample ``func(x, t)`` (broadcasting) on the interior space-time nodes."""
        tt, xx = np.meshgrid(self.t, self.x, indexing="ij")
        return SpaceTimeField(self, np.broadcast_to(func(xx, tt), self.shape).astype(float))


def make_grid(x_min: float, x_max: float, n_cells: int, T: float, n_steps: int) -> Grid:
    problems = []
    if not x_max > x_min:
        problems.append(f"x_max={x_max} must exceed x_min={x_min}")
    if int(n_cells) != n_cells or n_cells < 4:
        problems.append(f"n_cells={n_cells} must be an integer >= 4")
    if not T > 0:
        problems.append(f"T={T} must be positive")
    if int(n_steps) != n_steps or n_steps < 4:
        problems.append(f"n_steps={n_steps} must be an integer >= 4")
    if problems:
        raise DomainError("degenerate grid: " + "; ".join(problems))
    return Grid(float(x_min), float(x_max), int(n_cells), float(T), int(n_steps))


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Values on the interior nodes, indexed ``values[time_step, node]``.

    ``initial`` is only set by backward (adjoint) solves.  It is the discrete
    trace at t = 0 that pairs with an initial datum in the duality identity;
    for forward fields ``values[0]`` plays that role.
    """

    grid: Grid
    values: np.ndarray
    initial: np.ndarray | None = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise GridMismatchError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", values)
        if self.initial is not None:
            object.__setattr__(self, "initial", np.asarray(self.initial, dtype=float))

    @property
    def start(self) -> np.ndarray:
        return self.values[0] if self.initial is None else self.initial

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def _combine(self, other, op):
        if isinstance(other, SpaceTimeField):
            _check_same_grid(self, other)
            init = None
            if self.initial is not None and other.initial is not None:
                init = op(self.initial, other.initial)
            return SpaceTimeField(self.grid, op(self.values, other.values), init)
        return NotImplemented

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, other):
        if isinstance(other, SpaceTimeField):
            _check_same_grid(self, other)
            return SpaceTimeField(self.grid, self.values * other.values)
        other = np.asarray(other, dtype=float)
        init = None
        if self.initial is not None and other.ndim == 0:
            init = self.initial * other
        return SpaceTimeField(self.grid, self.values * other, init)

    __rmul__ = __mul__

    def masked(self, mask: "RegionMask") -> "SpaceTimeField":
        _check_same_grid(self, mask)
        return SpaceTimeField(self.grid, self.values * mask.indicator)


@dataclass(frozen=True, eq=False)
class RegionMask:
    name: str
    lo: float
    hi: float
    grid: Grid
    indicator: np.ndarray

    def __repr__(self):
        return f"RegionMask({self.name!r}, [{self.lo}, {self.hi}], nodes={int(self.indicator.sum())})"


def region_mask(grid: Grid, name: str, lo: float, hi: float) -> RegionMask:
    if name not in REGION_NAMES:
        raise ValueError(f"unknown region name {name!r}; expected one of {REGION_NAMES}")
    if not (grid.x_min <= lo < hi <= grid.x_max):
        raise GeometryError(f"region {name}=[{lo}, {hi}] must satisfy x_min <= lo < hi <= x_max")
    slack = 1e-9 * grid.dx
    x = grid.x
    indicator = ((x >= lo - slack) & (x <= hi + slack)).astype(float)
    return RegionMask(name, float(lo), float(hi), grid, indicator)


@dataclass(frozen=True)
class Regions:
    """The three subregions: leader support omega, follower support O, observation O_d."""

    omega: RegionMask
    O: RegionMask
    O_d: RegionMask


def make_regions(grid: Grid, omega, O, O_d, validate: bool = True) -> Regions:
    regions = Regions(region_mask(grid, "omega", *omega), region_mask(grid, "O", *O), region_mask(grid, "O_d", *O_d))
    if validate:
        validate_geometry(regions.omega, regions.O, regions.O_d)
    return regions


def validate_geometry(omega: RegionMask, O: RegionMask, O_d: RegionMask) -> None:
    """Raise :class:`GeometryError` unless omega and O are disjoint and omega meets O_d."""
    if not (omega.grid == O.grid == O_d.grid):
        raise GridMismatchError("region masks live on different grids")
    problems = []
    if np.any(omega.indicator * O.indicator > 0):
        problems.append("omega and O must be disjoint (omega ∩ O = ∅ violated)")
    if not np.any(omega.indicator * O_d.indicator > 0):
        problems.append("omega must meet O_d (omega ∩ O_d ≠ ∅ violated)")
    if problems:
        raise GeometryError("; ".join(problems))


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")


def inner_product_Q(f: SpaceTimeField, g: SpaceTimeField, mask: RegionMask | None = None) -> float:
    _check_same_grid(f, g)
    grid = f.grid
    prod = f.values * g.values
    if mask is not None:
        _check_same_grid(f, mask)
        prod = prod * mask.indicator
    return float(grid.dx * (grid.time_weights() @ prod.sum(axis=1)))


def norm_Q(f: SpaceTimeField, mask: RegionMask | None = None) -> float:
    return float(np.sqrt(max(inner_product_Q(f, f, mask), 0.0)))


def inner_product_Omega(f_slice, g_slice, dx: float | None = None, grid: Grid | None = None) -> float:
    """Spatial rectangle rule on interior nodes; pass either ``dx`` or ``grid``."""
    f_slice = np.asarray(f_slice, dtype=float)
    g_slice = np.asarray(g_slice, dtype=float)
    if f_slice.shape != g_slice.shape:
        raise GridMismatchError(f"slice lengths differ: {f_slice.shape} vs {g_slice.shape}")
    if dx is None:
        if grid is None:
            raise TypeError("inner_product_Omega needs dx or grid")
        dx = grid.dx
    return float(dx * np.dot(f_slice, g_slice))


def norm_Omega(f_slice, grid: Grid) -> float:
    return float(np.sqrt(inner_product_Omega(f_slice, f_slice, grid=grid)))
