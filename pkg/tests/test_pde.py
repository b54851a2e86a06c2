import numpy as np
import pytest
from scipy.sparse import diags

from conftest import build, random_field, random_potential, rel, sine
from robust_stackelberg.errors import ConvergenceError
from robust_stackelberg.mesh import SpaceTimeField, inner_product_Omega, inner_product_Q, make_grid, norm_Omega, norm_Q
from robust_stackelberg.pde import (
    Nonlinearity,
    Potential,
    solve_backward_linear,
    solve_forward_linear,
    solve_forward_semilinear,
    solve_linearized_first,
    solve_linearized_second,
)


def relative_l2(approx, exact, grid):
    return norm_Omega(approx - exact, grid) / norm_Omega(exact, grid)


class TestForwardLinear:
    def test_zero(self):
        g = make_grid(0, 1, 16, 1, 16)
        y = solve_forward_linear(Potential.zero(g), g.zeros(), np.zeros(g.n_interior))
        assert np.all(y.values == 0)

    @pytest.mark.parametrize("a", [0.0, 1.0])
    def test_eigenmode(self, a):
        g = make_grid(0, 1, 64, 0.5, 128)
        y = solve_forward_linear(Potential.constant(g, a), g.zeros(), sine(g))
        exact = np.exp(-(np.pi**2 + a) * g.T) * sine(g)
        assert relative_l2(y.final, exact, g) <= 10 * (g.dt**2 + g.dx**2)

    def test_discrete_amplification(self):
        # sin(pi x) is a discrete eigenvector; each step multiplies it by the Crank-Nicolson factor
        g = make_grid(0, 1, 64, 1.0, 128)
        lam = 4 / g.dx**2 * np.sin(np.pi * g.dx / 2) ** 2 + 1.0
        factor = ((1 - lam * g.dt / 2) / (1 + lam * g.dt / 2)) ** g.n_steps
        y = solve_forward_linear(Potential.constant(g, 1.0), g.zeros(), sine(g))
        assert np.max(np.abs(y.final - factor * sine(g))) <= 1e-15

    def test_second_order_at_unit_horizon(self):
        errs = []
        for n in (16, 32, 64):
            g = make_grid(0, 1, n, 1.0, 2 * n)
            y = solve_forward_linear(Potential.constant(g, 1.0), g.zeros(), sine(g))
            errs.append(relative_l2(y.final, np.exp(-(np.pi**2 + 1)) * sine(g), g))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all((ratios > 3.8) & (ratios < 4.2))

    def test_rejects_bad_initial(self):
        g = make_grid(0, 1, 16, 1, 16)
        with pytest.raises(Exception):
            solve_forward_linear(Potential.zero(g), g.zeros(), np.zeros(3))


class TestBackwardLinear:
    def test_zero(self):
        g = make_grid(0, 1, 16, 1, 16)
        q = solve_backward_linear(Potential.zero(g), g.zeros(), np.zeros(g.n_interior))
        assert np.all(q.values == 0) and np.all(q.start == 0)

    def test_eigenmode(self):
        g = make_grid(0, 1, 64, 0.5, 128)
        T = g.T
        q = solve_backward_linear(Potential.zero(g), g.zeros(), sine(g))
        exact = np.exp(-np.pi**2 * T) * sine(g)
        assert relative_l2(q.start, exact, g) <= 10 * (g.dt**2 + g.dx**2)
        mid = g.n_steps // 2
        exact_mid = np.exp(-np.pi**2 * (T - g.t[mid])) * sine(g)
        assert relative_l2(q.values[mid], exact_mid, g) <= 10 * (g.dt**2 + g.dx**2)


class TestDuality:
    def test_zero_source(self, rng):
        grid, _ = build(16, 16)
        worst = 0.0
        for _ in range(50):
            a = random_potential(grid, rng)
            y0, phiT = rng.standard_normal(grid.n_interior), rng.standard_normal(grid.n_interior)
            y = solve_forward_linear(a, grid.zeros(), y0)
            phi = solve_backward_linear(a, grid.zeros(), phiT)
            worst = max(worst, rel(inner_product_Omega(y.final, phiT, grid=grid), inner_product_Omega(y0, phi.start, grid=grid)))
        assert worst <= 1e-12

    def test_with_sources(self, rng):
        grid, _ = build(16, 24)
        for _ in range(20):
            a = random_potential(grid, rng)
            s_fwd, s_bwd = random_field(grid, rng), random_field(grid, rng)
            y0, phiT = rng.standard_normal(grid.n_interior), rng.standard_normal(grid.n_interior)
            y = solve_forward_linear(a, s_fwd, y0)
            phi = solve_backward_linear(a, s_bwd, phiT)
            lhs = inner_product_Omega(y.final, phiT, grid=grid) - inner_product_Omega(y0, phi.start, grid=grid)
            rhs = inner_product_Q(s_fwd, phi) - inner_product_Q(s_bwd, y)
            assert rel(lhs, rhs) <= 1e-10


def newton_oracle(f, source, y0, tol=1e-14):
    """Global Newton on the all-steps midpoint system with a dense Jacobian."""
    grid = source.grid
    n, K, dt = grid.n_interior, grid.n_steps, grid.dt
    lap = diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).toarray() / grid.dx**2
    eye = np.eye(n)
    s = 0.5 * (source.values[1:] + source.values[:-1])
    Y = np.tile(y0, K)

    def unpack(Y):
        return np.vstack([y0[None, :], Y.reshape(K, n)])

    for _ in range(50):
        y = unpack(Y)
        ybar = 0.5 * (y[1:] + y[:-1])
        R = ((y[1:] - y[:-1]) / dt + ybar @ lap + f.f(ybar) - s).ravel()
        J = np.zeros((K * n, K * n))
        for k in range(K):
            D = np.diag(0.5 * f.f_prime(ybar[k]))
            J[k * n:(k + 1) * n, k * n:(k + 1) * n] = eye / dt + 0.5 * lap + D
            if k > 0:
                J[k * n:(k + 1) * n, (k - 1) * n:k * n] = -eye / dt + 0.5 * lap + D
        delta = np.linalg.solve(J, -R)
        Y = Y + delta
        if np.max(np.abs(delta)) <= tol * max(1.0, np.max(np.abs(Y))):
            break
    return SpaceTimeField(grid, unpack(Y))


class TestSemilinear:
    def test_zero_nonlinearity_reduces_to_linear(self, rng):
        grid, _ = build(16, 16)
        zero = Nonlinearity.linear(0.0)
        src, y0 = random_field(grid, rng), rng.standard_normal(grid.n_interior)
        y = solve_forward_semilinear(zero, src, y0)
        ref = solve_forward_linear(Potential.zero(grid), src, y0)
        assert np.max(np.abs(y.values - ref.values)) <= 1e-14 * np.max(np.abs(ref.values))

    def test_zero_state_preserved(self):
        grid, _ = build(16, 16)
        y = solve_forward_semilinear(Nonlinearity.tanh(), grid.zeros(), np.zeros(grid.n_interior))
        assert np.all(y.values == 0)

    def test_newton_oracle(self):
        grid, _ = build(16, 16)
        f = Nonlinearity.tanh()
        y = solve_forward_semilinear(f, grid.zeros(), sine(grid))
        ref = newton_oracle(f, grid.zeros(), sine(grid))
        assert norm_Q(y - ref) / norm_Q(ref) <= 1e-8

    def test_newton_oracle_with_source(self, rng):
        grid, _ = build(16, 16)
        f = Nonlinearity.tanh(2.0)
        src = random_field(grid, rng, scale=5.0)
        y = solve_forward_semilinear(f, src, sine(grid))
        ref = newton_oracle(f, src, sine(grid))
        assert norm_Q(y - ref) / norm_Q(ref) <= 1e-8

    @pytest.mark.parametrize("f", [Nonlinearity.tanh(3.0), Nonlinearity.tanh(-0.5)])
    def test_no_growth(self, f, rng):
        grid, _ = build(32, 32)
        assert grid.dt * f.lipschitz_bound < 2
        y = solve_forward_semilinear(f, grid.zeros(), rng.standard_normal(grid.n_interior))
        norms = [norm_Omega(row, grid) for row in y.values]
        assert np.all(np.diff(norms) <= 1e-14 * norms[0])

    def test_inner_iteration_cap(self):
        grid, _ = build(16, 16)
        with pytest.raises(ConvergenceError, match="step 0"):
            solve_forward_semilinear(Nonlinearity.tanh(), grid.zeros(), 5 * sine(grid), max_inner=1)

    def test_iterations_reported(self):
        grid, _ = build(16, 16)
        _, most = solve_forward_semilinear(Nonlinearity.tanh(), grid.zeros(), sine(grid), return_iterations=True)
        assert 1 < most < 100


class TestLinearizedFirst:
    def setup_method(self):
        self.grid, self.masks = build(32, 32)
        self.rng = np.random.default_rng(7)

    def base(self, f):
        y0 = sine(self.grid)
        v = random_field(self.grid, self.rng, self.masks.O)
        psi = random_field(self.grid, self.rng)
        v1 = random_field(self.grid, self.rng, self.masks.O)
        psi1 = random_field(self.grid, self.rng)

        def state(tau):
            return solve_forward_semilinear(f, (v + v1 * tau).masked(self.masks.O) + psi + psi1 * tau, y0, tol=1e-15)

        return state, v1, psi1

    def test_zero_direction(self):
        f = Nonlinearity.tanh()
        y = solve_forward_semilinear(f, self.grid.zeros(), sine(self.grid))
        w = solve_linearized_first(f, y, self.grid.zeros(), self.grid.zeros(), self.masks.O)
        assert np.all(w.values == 0)

    def test_linear_f_exact(self):
        f = Nonlinearity.linear(0.7)
        state, v1, psi1 = self.base(f)
        y = state(0.0)
        w = solve_linearized_first(f, y, v1, psi1, self.masks.O)
        for tau in (1.0, 1e-2):
            quotient = (state(tau) - y) * (1 / tau)
            assert norm_Q(quotient - w) <= 1e-10 * norm_Q(w)

    def test_tanh_first_order(self):
        f = Nonlinearity.tanh()
        state, v1, psi1 = self.base(f)
        y = state(0.0)
        w = solve_linearized_first(f, y, v1, psi1, self.masks.O)
        taus = 1e-2 / 2.0 ** np.arange(7)
        errs = [norm_Q((state(t) - y) * (1 / t) - w) for t in taus]
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all((ratios > 1.8) & (ratios < 2.2))
        assert errs[-1] < 1e-3 * norm_Q(w)

    def test_superposition(self):
        f = Nonlinearity.tanh()
        y = solve_forward_semilinear(f, self.grid.zeros(), sine(self.grid))
        O = self.masks.O
        a1, a2 = random_field(self.grid, self.rng, O), random_field(self.grid, self.rng, O)
        b1, b2 = random_field(self.grid, self.rng), random_field(self.grid, self.rng)
        w = solve_linearized_first(f, y, a1 + a2 * 3.0, b1 + b2 * 3.0, O)
        w_sum = solve_linearized_first(f, y, a1, b1, O) + solve_linearized_first(f, y, a2, b2, O) * 3.0
        assert norm_Q(w - w_sum) <= 1e-13 * norm_Q(w)


class TestLinearizedSecond:
    def setup_method(self):
        self.grid, self.masks = build(32, 32)
        self.rng = np.random.default_rng(11)

    def test_zero_inputs(self):
        f = Nonlinearity.tanh()
        y = solve_forward_semilinear(f, self.grid.zeros(), sine(self.grid))
        w = random_field(self.grid, self.rng)
        assert np.all(solve_linearized_second(f, y, self.grid.zeros(), w).values == 0)
        assert np.all(solve_linearized_second(f, y, w, self.grid.zeros()).values == 0)

    def test_linear_f(self):
        f = Nonlinearity.linear(1.3)
        y = solve_forward_semilinear(f, self.grid.zeros(), sine(self.grid))
        w1, w2 = random_field(self.grid, self.rng), random_field(self.grid, self.rng)
        assert np.all(solve_linearized_second(f, y, w1, w2).values == 0)

    def test_second_difference(self):
        f = Nonlinearity.tanh()
        y0 = 2 * sine(self.grid)
        psi = random_field(self.grid, self.rng, scale=3.0)
        dpsi = random_field(self.grid, self.rng, scale=3.0)
        zero = self.grid.zeros()

        def state(tau):
            return solve_forward_semilinear(f, psi + dpsi * tau, y0, tol=1e-15)

        y = state(0.0)
        w = solve_linearized_first(f, y, zero, dpsi, self.masks.O)
        z = solve_linearized_second(f, y, w, w)
        taus = [0.2, 0.1, 0.05, 0.025]
        errs = [norm_Q((state(t) - y * 2.0 + state(-t)) * (1 / t**2) - z) for t in taus]
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all((ratios > 3.5) & (ratios < 4.5))
        assert errs[-1] < 1e-3 * norm_Q(z)

    def test_superposition(self):
        f = Nonlinearity.tanh()
        y = solve_forward_semilinear(f, self.grid.zeros(), sine(self.grid))
        w1, w2, w3 = (random_field(self.grid, self.rng) for _ in range(3))
        z = solve_linearized_second(f, y, w1 + w2 * 2.0, w3)
        z_sum = solve_linearized_second(f, y, w1, w3) + solve_linearized_second(f, y, w2, w3) * 2.0
        assert norm_Q(z - z_sum) <= 1e-13 * norm_Q(z)


class TestNonlinearity:
    def test_rejects_nonzero_at_origin(self):
        with pytest.raises(ValueError, match="f\\(0\\)"):
            Nonlinearity(lambda s: np.asarray(s) + 1, lambda s: np.ones_like(s), lambda s: np.zeros_like(s), 1.0)

    def test_rejects_understated_bound(self):
        with pytest.raises(ValueError, match="lipschitz"):
            Nonlinearity(lambda s: 2 * np.asarray(s), lambda s: np.full_like(s, 2.0), lambda s: np.zeros_like(s), 1.0)

    def test_table_reproduces_nodes(self):
        s = np.linspace(-4, 4, 81)
        f = Nonlinearity.from_table(s, np.tanh(s))
        np.testing.assert_allclose(f.f(s), np.tanh(s), atol=1e-14)
        assert abs(float(f.f(np.array(0.0)))) < 1e-14
        np.testing.assert_allclose(f.f_prime(np.array([0.0])), [1.0], atol=1e-3)

    def test_potential_sup_norm_recomputed(self, rng):
        grid, _ = build(16, 16)
        vals = rng.standard_normal(grid.shape)
        p = Potential.from_field(SpaceTimeField(grid, vals))
        assert p.sup_norm == np.max(np.abs(vals))
        assert Potential(grid, p.mid).sup_norm == np.max(np.abs(p.mid))
