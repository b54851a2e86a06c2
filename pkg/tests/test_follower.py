import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import build, random_field, rel, sine
from robust_stackelberg.coupled import RobustParams
from robust_stackelberg.follower import (
    GAMMA_TOO_SMALL,
    AdmissibleBox,
    curvature_probe,
    eval_Jr,
    grad_Jr,
    projection_coefficient,
    solve_saddle_ascent_descent,
    solve_saddle_direct,
    solve_saddle_projected,
    solve_state,
)
from robust_stackelberg.mesh import SpaceTimeField, inner_product_Q, norm_Q
from robust_stackelberg.pde import Nonlinearity, Potential


def problem(grid, masks, rng):
    return random_field(grid, rng, masks.omega), sine(grid), random_field(grid, rng, masks.O_d)


def J(v, psi, h, y0, yd, model, params, masks):
    return eval_Jr(solve_state(h, v, psi, y0, model, masks), v, psi, yd, params, masks)


def unit_direction(grid, rng, mask=None, length=1.0):
    d = random_field(grid, rng, mask)
    return d * (length / norm_Q(d))


class TestEvalJr:
    def test_zero(self, small, params):
        grid, masks = small
        yd = sine(grid) * np.ones((grid.n_steps + 1, 1))
        yd = SpaceTimeField(grid, yd)
        assert eval_Jr(yd, grid.zeros(), grid.zeros(), yd, params, masks) == 0.0

    def test_constant_control(self, medium, params):
        grid, masks = medium
        one = SpaceTimeField(grid, np.ones(grid.shape))
        mu = masks.O.hi - masks.O.lo
        value = eval_Jr(grid.zeros(), one, grid.zeros(), grid.zeros(), params, masks)
        assert abs(value - 0.5 * params.ell**2 * mu * grid.T) <= 0.5 * params.ell**2 * grid.T * 2 * grid.dx

    def test_direct_summation(self, small, rng, params):
        grid, masks = small
        y, v, psi, yd = (random_field(grid, rng) for _ in range(4))
        w = np.full(grid.n_steps + 1, grid.dt)
        w[0] = w[-1] = grid.dt / 2
        total = 0.0
        for n in range(grid.n_steps + 1):
            for i in range(grid.n_interior):
                cell = (
                    masks.O_d.indicator[i] * (y.values[n, i] - yd.values[n, i]) ** 2
                    + params.ell**2 * masks.O.indicator[i] * v.values[n, i] ** 2
                    - params.gamma**2 * psi.values[n, i] ** 2
                )
                total += 0.5 * w[n] * grid.dx * cell
        assert rel(eval_Jr(y, v, psi, yd, params, masks), total) <= 1e-13


class TestGradient:
    def test_zero_at_direct_saddle(self, medium, rng, params):
        grid, masks = medium
        h, y0, yd = problem(grid, masks, rng)
        a = Potential.zero(grid)
        sol = solve_saddle_direct(h, y0, yd, a, params, masks)
        gv, gp = grad_Jr(sol.v_bar, sol.psi_bar, h, y0, yd, a, params, masks)
        assert norm_Q(gv) <= 1e-8 and norm_Q(gp) <= 1e-8

    def test_zero_when_tracking_exact(self, small, rng, params):
        grid, masks = small
        h, y0 = random_field(grid, rng, masks.omega), sine(grid)
        a = Potential.constant(grid, 0.3)
        yd = solve_state(h, grid.zeros(), grid.zeros(), y0, a, masks).masked(masks.O_d)
        gv, gp = grad_Jr(grid.zeros(), grid.zeros(), h, y0, yd, a, params, masks)
        assert norm_Q(gv) == 0.0 and norm_Q(gp) == 0.0

    @pytest.mark.parametrize("model_name, threshold", [("linear", 1e-6), ("tanh", 1e-5)])
    def test_finite_differences(self, medium, rng, params, model_name, threshold):
        grid, masks = medium
        model = Potential.constant(grid, 0.5) if model_name == "linear" else Nonlinearity.tanh()
        h, y0, yd = problem(grid, masks, rng)
        v, psi = random_field(grid, rng, masks.O, 0.1), random_field(grid, rng, scale=0.1)
        gv, gp = grad_Jr(v, psi, h, y0, yd, model, params, masks)
        step = 1e-5
        for _ in range(20):
            dv, dp = random_field(grid, rng, masks.O), random_field(grid, rng)
            fd = (J(v + dv * step, psi + dp * step, h, y0, yd, model, params, masks)
                  - J(v - dv * step, psi - dp * step, h, y0, yd, model, params, masks)) / (2 * step)
            exact = inner_product_Q(gv, dv, masks.O) + inner_product_Q(gp, dp)
            assert rel(fd, exact) <= threshold


class TestDirectSaddle:
    def test_zero_data(self, small, params):
        grid, masks = small
        zero = grid.zeros()
        sol = solve_saddle_direct(zero, np.zeros(grid.n_interior), zero, Potential.zero(grid), params, masks)
        assert np.all(sol.v_bar.values == 0) and np.all(sol.psi_bar.values == 0) and sol.J_value == 0

    def test_characterization(self, small, rng, params):
        grid, masks = small
        h, y0, yd = problem(grid, masks, rng)
        sol = solve_saddle_direct(h, y0, yd, Potential.zero(grid), params, masks)
        np.testing.assert_allclose(sol.v_bar.values, -masks.O.indicator * sol.q.values / params.ell**2, atol=1e-15)
        np.testing.assert_allclose(sol.psi_bar.values, sol.q.values / params.gamma**2, atol=1e-15)
        assert sol.stationarity_v <= 1e-8 and sol.stationarity_psi <= 1e-8

    @pytest.mark.parametrize("model_name", ["linear", "tanh"])
    def test_saddle_inequalities(self, small, rng, params, model_name):
        grid, masks = small
        model = Potential.zero(grid) if model_name == "linear" else Nonlinearity.tanh()
        h, y0, yd = problem(grid, masks, rng)
        sol = solve_saddle_direct(h, y0, yd, model, params, masks)
        center = J(sol.v_bar, sol.psi_bar, h, y0, yd, model, params, masks)
        for _ in range(100):
            dv = unit_direction(grid, rng, masks.O, 0.1)
            dp = unit_direction(grid, rng, None, 0.1)
            assert J(sol.v_bar, sol.psi_bar + dp, h, y0, yd, model, params, masks) <= center + 1e-9
            assert J(sol.v_bar + dv, sol.psi_bar, h, y0, yd, model, params, masks) >= center - 1e-9


class TestAscentDescent:
    def test_zero_data_immediate(self, small, params):
        grid, masks = small
        zero = grid.zeros()
        sol = solve_saddle_ascent_descent(zero, np.zeros(grid.n_interior), zero, Potential.zero(grid), params, masks)
        assert sol.iterations == 0 and sol.converged

    @pytest.mark.parametrize("model_name", ["linear", "tanh"])
    def test_matches_direct(self, medium, rng, params, model_name):
        grid, masks = medium
        model = Potential.zero(grid) if model_name == "linear" else Nonlinearity.tanh()
        h, y0, yd = problem(grid, masks, rng)
        direct = solve_saddle_direct(h, y0, yd, model, params, masks)
        ad = solve_saddle_ascent_descent(h, y0, yd, model, params, masks)
        assert ad.converged
        assert norm_Q(direct.v_bar - ad.v_bar) <= 1e-6 and norm_Q(direct.psi_bar - ad.psi_bar) <= 1e-6

    def test_uniqueness_from_five_starts(self, small, rng, params):
        grid, masks = small
        a = Potential.zero(grid)
        h, y0, yd = problem(grid, masks, rng)
        sols = [
            solve_saddle_ascent_descent(h, y0, yd, a, params, masks, v0=random_field(grid, rng, masks.O), psi0=random_field(grid, rng))
            for _ in range(5)
        ]
        for s in sols[1:]:
            assert norm_Q(s.v_bar - sols[0].v_bar) <= 1e-6 and norm_Q(s.psi_bar - sols[0].psi_bar) <= 1e-6

    def test_gamma_too_small(self, small, rng):
        grid, masks = small
        h, y0, yd = problem(grid, masks, rng)
        sol = solve_saddle_ascent_descent(h, y0, yd, Potential.zero(grid), RobustParams(10.0, 0.01), masks)
        assert GAMMA_TOO_SMALL in sol.flags and not sol.converged

    def test_rejects_nonpositive_step(self, small, rng, params):
        grid, masks = small
        h, y0, yd = problem(grid, masks, rng)
        with pytest.raises(ValueError):
            solve_saddle_ascent_descent(h, y0, yd, Potential.zero(grid), params, masks, step_v=-1.0)


class TestProjected:
    def setup_method(self):
        self.grid, self.masks = build(16, 16)
        rng = np.random.default_rng(3)
        self.h, self.y0, self.yd = problem(self.grid, self.masks, rng)
        self.a = Potential.zero(self.grid)
        self.params = RobustParams(10.0, 10.0)

    def test_inactive_box(self):
        free = solve_saddle_direct(self.h, self.y0, self.yd, self.a, self.params, self.masks)
        box = AdmissibleBox(-1e6, 1e6, -1e6, 1e6)
        sol = solve_saddle_projected(self.h, self.y0, self.yd, self.a, self.params, box, self.masks)
        assert sol.converged
        assert norm_Q(sol.v_bar - free.v_bar) <= 1e-8 and norm_Q(sol.psi_bar - free.psi_bar) <= 1e-8

    def test_degenerate_box(self):
        sol = solve_saddle_projected(self.h, self.y0, self.yd, self.a, self.params, AdmissibleBox(0, 0, 0, 0), self.masks)
        assert np.all(sol.v_bar.values == 0) and np.all(sol.psi_bar.values == 0)

    def test_active_box(self):
        free = solve_saddle_direct(self.h, self.y0, self.yd, self.a, self.params, self.masks)
        bv = 0.5 * np.max(np.abs(free.v_bar.values))
        bp = 0.3 * np.max(np.abs(free.psi_bar.values))
        box = AdmissibleBox(-bv, 0.5 * bv, -bp, bp)
        sol = solve_saddle_projected(self.h, self.y0, self.yd, self.a, self.params, box, self.masks, n_probes=100)
        assert sol.converged and sol.mode == "projected"
        q = sol.q.values
        assert np.max(np.abs(sol.v_bar.values - self.masks.O.indicator * np.clip(-q / self.params.ell**2, *box.E1))) <= 1e-12
        assert np.max(np.abs(sol.psi_bar.values - np.clip(q / self.params.gamma**2, *box.E2))) <= 1e-12
        assert np.all((sol.v_bar.values >= box.e1_lo) & (sol.v_bar.values <= box.e1_hi))
        assert np.all((sol.psi_bar.values >= box.e2_lo) & (sol.psi_bar.values <= box.e2_hi))
        assert sol.vi_slack_v >= -1e-9 and sol.vi_slack_psi >= -1e-9
        # the bounds really bind somewhere
        assert np.any(sol.psi_bar.values == bp) or np.any(sol.psi_bar.values == -bp)

    def test_rejects_nonlinear(self):
        with pytest.raises(TypeError):
            solve_saddle_projected(self.h, self.y0, self.yd, Nonlinearity.tanh(), self.params, AdmissibleBox(0, 0, 0, 0), self.masks)

    def test_box_must_contain_zero(self):
        with pytest.raises(ValueError):
            AdmissibleBox(0.1, 1.0, -1.0, 1.0)


class TestProjectionCoefficient:
    def test_inside(self):
        np.testing.assert_array_equal(projection_coefficient(np.array([-0.5, 0.0, 0.9]), (-1, 1)), [1, 1, 1])

    def test_half(self):
        assert projection_coefficient(np.array([2.0]), (-1, 1))[0] == 0.5

    def test_degenerate_interval(self):
        np.testing.assert_array_equal(projection_coefficient(np.array([3.0, 0.0, -2.0]), (0, 0)), [0, 1, 0])

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, 20, elements=st.floats(-1e6, 1e6, allow_nan=False)),
        st.floats(-10, 0, allow_nan=False),
        st.floats(0, 10, allow_nan=False),
    )
    def test_reconstruction(self, z, lo, hi):
        rho = projection_coefficient(z, (lo, hi))
        assert np.all((rho >= 0) & (rho <= 1))
        # a subnormal coefficient (tiny bound over large z) carries only a few bits
        np.testing.assert_allclose(rho * z, np.clip(z, lo, hi), rtol=1e-15, atol=np.finfo(float).tiny)


class TestCurvature:
    def test_linear_formula(self, small, rng, params):
        grid, masks = small
        a = Potential.zero(grid)
        h, y0, yd = problem(grid, masks, rng)
        dv, dp = random_field(grid, rng, masks.O), random_field(grid, rng)
        along_psi, along_v = curvature_probe(grid.zeros(), grid.zeros(), (dv, dp), h, y0, yd, a, params, masks)
        yp = solve_state(grid.zeros(), grid.zeros(), dp, np.zeros(grid.n_interior), a, masks)
        assert rel(along_psi, inner_product_Q(yp, yp, masks.O_d) - params.gamma**2 * inner_product_Q(dp, dp)) <= 1e-14
        # f'' = 0 for a linear nonlinearity, so the two model kinds agree
        lin = Nonlinearity.linear(0.0)
        along_psi2, along_v2 = curvature_probe(grid.zeros(), grid.zeros(), (dv, dp), h, y0, yd, lin, params, masks)
        assert rel(along_psi, along_psi2) <= 1e-12 and rel(along_v, along_v2) <= 1e-12

    def test_signs_and_finite_differences(self, small, rng):
        grid, masks = small
        params = RobustParams(1e3, 1e3)
        f = Nonlinearity.tanh()
        h, y0 = random_field(grid, rng, masks.omega), sine(grid)
        yd = SpaceTimeField(grid, np.ones(grid.shape)).masked(masks.O_d)
        v, psi = random_field(grid, rng, masks.O, 0.1), random_field(grid, rng, scale=0.1)
        tau = 1e-3
        for _ in range(20):
            dv, dp = random_field(grid, rng, masks.O), random_field(grid, rng)
            along_psi, along_v = curvature_probe(v, psi, (dv, dp), h, y0, yd, f, params, masks)
            assert along_psi < 0 < along_v
            c = J(v, psi, h, y0, yd, f, params, masks)
            fd_psi = (J(v, psi + dp * tau, h, y0, yd, f, params, masks) - 2 * c + J(v, psi - dp * tau, h, y0, yd, f, params, masks)) / tau**2
            fd_v = (J(v + dv * tau, psi, h, y0, yd, f, params, masks) - 2 * c + J(v - dv * tau, psi, h, y0, yd, f, params, masks)) / tau**2
            assert rel(fd_psi, along_psi) <= 1e-4 and rel(fd_v, along_v) <= 1e-4

    def test_three_point_concavity_convexity(self, small, rng, params):
        grid, masks = small
        f = Nonlinearity.tanh()
        h, y0, yd = problem(grid, masks, rng)
        v, psi = random_field(grid, rng, masks.O, 0.1), random_field(grid, rng, scale=0.1)
        for _ in range(10):
            dv, dp = random_field(grid, rng, masks.O), random_field(grid, rng)
            mid = J(v, psi, h, y0, yd, f, params, masks)
            ends_psi = J(v, psi + dp, h, y0, yd, f, params, masks) + J(v, psi - dp, h, y0, yd, f, params, masks)
            ends_v = J(v + dv, psi, h, y0, yd, f, params, masks) + J(v - dv, psi, h, y0, yd, f, params, masks)
            assert ends_psi < 2 * mid < ends_v
