import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consensus_ot.model import Utility, linear, log_revenue, quadratic, threshold
from consensus_ot.oracle import grid_maximize
from consensus_ot.subproblems import (DualAgentProblem, ProxProblem, agent_solution_kkt, dual_agent_as_prox,
                                      project_simplex, prox_kkt_residual, solve_dual_agent, solve_prox)

from conftest import random_utility


def zero():
    return linear(0.0)


class TestProx:
    @pytest.mark.parametrize("u", [linear(1.0), quadratic(2.0), log_revenue(1.0), threshold(1.0, 0.5)])
    def test_equality_forces_amount(self, u):
        sol = solve_prox(ProxProblem((u,), [0.3], [7.0], 1.0, 3.0, 3.0))
        assert sol.amounts[0] == pytest.approx(3.0, abs=1e-12)

    def test_pure_projection(self):
        sol = solve_prox(ProxProblem((zero(), zero()), [0, 0], [2, -1], 1.0))
        np.testing.assert_allclose(sol.amounts, [2.0, 0.0], atol=1e-12)

    def test_simplex_example_matches_grid(self):
        prob = ProxProblem((linear(1.0), zero()), [0, 0], [0, 0], 1.0, 1.0, 1.0)
        sol = solve_prox(prob)
        np.testing.assert_allclose(sol.amounts, [1.0, 0.0], atol=1e-12)
        assert sol.multiplier == pytest.approx(0.0, abs=1e-12)
        grid = grid_maximize(lambda x: -np.array([prob.objective(p) for p in x]), 2, 1e-4,
                             A_eq=np.ones((1, 2)), b_eq=[1.0])
        np.testing.assert_allclose(sol.amounts, grid.point, atol=1e-4)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            ProxProblem((zero(),), [np.nan], [0.0], 1.0)
        with pytest.raises(ValueError):
            ProxProblem((zero(),), [0.0], [0.0], 0.0)
        with pytest.raises(ValueError):
            ProxProblem((zero(),), [0.0], [0.0], 1.0, 2.0, 1.0)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        utils = tuple(random_utility(rng) for _ in range(4))
        prob = ProxProblem(utils, rng.normal(size=4), rng.normal(size=4), 0.7, 0.5, 2.0)
        a, b = solve_prox(prob), solve_prox(prob)
        assert a.amounts.tobytes() == b.amounts.tobytes() and a.multiplier == b.multiplier


@st.composite
def prox_problems(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    utils = tuple(random_utility(rng) for _ in range(n))
    lower = float(rng.choice([0.0, rng.random() * 2]))
    upper = float(rng.choice([np.inf, lower, lower + rng.random() * 3]))
    eta = float(rng.choice([0.1, 1.0, 5.0]))
    return ProxProblem(utils, rng.normal(size=n) * 2, rng.normal(size=n) * 2, eta, lower, upper)


@given(prox_problems())
@settings(max_examples=300, deadline=None)
def test_prox_kkt_and_feasibility(prob):
    sol = solve_prox(prob)
    assert np.all(sol.amounts >= 0)
    total = sol.amounts.sum()
    slack = 1e-10 * max(1.0, prob.upper if np.isfinite(prob.upper) else prob.lower)
    assert prob.lower - slack <= total <= prob.upper + slack
    assert prox_kkt_residual(prob, sol.amounts, sol.multiplier) <= 1e-8


@given(prox_problems(), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_prox_beats_random_feasible_points(prob, seed):
    sol = solve_prox(prob)
    rng = np.random.default_rng(seed)
    best = prob.objective(sol.amounts)
    n = len(prob.utilities)
    for _ in range(20):
        x = rng.random(n)
        total = rng.uniform(prob.lower, min(prob.upper, prob.lower + 3.0))
        x = x / x.sum() * total
        assert best <= prob.objective(x) + 1e-9 * max(1.0, abs(best))


class TestDualAgent:
    def test_single_target(self):
        sol = solve_dual_agent(DualAgentProblem("target", 1.0, [1.0], [0.0], [0.0], 1.0))
        assert sol.lambdas[0] == 1.0 and sol.prices[0] == 1.0 and sol.surplus == 0.0

    def test_single_source(self):
        sol = solve_dual_agent(DualAgentProblem("source", 1.0, [2.0], [0.0], [0.0], 1.0))
        assert sol.lambdas[0] == 1.0 and sol.prices[0] == -1.0 and sol.surplus == 1.0

    def test_two_neighbors_matches_grid(self):
        sol = solve_dual_agent(DualAgentProblem("target", 1.0, [1.0, 0.0], [0.0, 0.0], [0.0, 0.0], 1.0))
        np.testing.assert_allclose(sol.lambdas, [1.0, 0.0], atol=1e-12)

        def neg(lam):
            return np.sum(lam * [1.0, 0.0], axis=1) - 0.5 * np.sum(lam**2, axis=1)

        grid = grid_maximize(neg, 2, 1e-4, A_eq=np.ones((1, 2)), b_eq=[1.0])
        np.testing.assert_allclose(sol.lambdas, grid.point, atol=1e-4)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            DualAgentProblem("target", 0.0, [1.0], [0.0], [0.0], 1.0)
        with pytest.raises(ValueError):
            DualAgentProblem("target", 1.0, [np.inf], [0.0], [0.0], 1.0)
        with pytest.raises(ValueError):
            DualAgentProblem("middle", 1.0, [1.0], [0.0], [0.0], 1.0)


@st.composite
def dual_problems(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    n = int(rng.integers(1, 7))
    side = draw(st.sampled_from(["target", "source"]))
    return DualAgentProblem(side, float(rng.uniform(0.1, 2)), rng.random(n), rng.normal(size=n),
                            rng.normal(size=n), float(rng.choice([0.5, 1.0, 2.0])))


@given(dual_problems())
@settings(max_examples=200, deadline=None)
def test_dual_agent_properties(prob):
    sol = solve_dual_agent(prob)
    assert np.all(sol.lambdas >= 0)
    assert sol.lambdas.sum() == pytest.approx(prob.mass, abs=1e-12)
    sign = 1.0 if prob.side == "target" else -1.0
    recovered = prob.wbar + sign * (sol.lambdas - prob.beta) / prob.eta_hat
    np.testing.assert_allclose(sol.prices, recovered, rtol=0, atol=1e-15)
    net = prob.coef - sol.prices if prob.side == "target" else prob.coef + sol.prices
    assert sol.surplus == np.max(net)
    assert agent_solution_kkt(prob, sol) <= 1e-8
    again = solve_dual_agent(prob)
    assert again.prices.tobytes() == sol.prices.tobytes()


@given(dual_problems())
@settings(max_examples=200, deadline=None)
def test_dual_of_dual_identity(prob):
    lam = solve_dual_agent(prob).lambdas
    via_prox = solve_prox(dual_agent_as_prox(prob)).amounts
    np.testing.assert_allclose(lam, via_prox, rtol=0, atol=1e-9)


class TestProjectSimplex:
    def test_on_simplex(self):
        np.testing.assert_array_equal(project_simplex([0.5, 0.5]), [0.5, 0.5])

    def test_clamp(self):
        np.testing.assert_array_equal(project_simplex([2.0, 0.0]), [1.0, 0.0])

    def test_three_coordinates_matches_grid(self):
        v = np.array([0.6, 0.4, 0.2])
        grid = grid_maximize(lambda x: -np.sum((x - v) ** 2, axis=1), 3, 1e-4, A_eq=np.ones((1, 3)), b_eq=[1.0])
        np.testing.assert_allclose(project_simplex(v), grid.point, atol=2e-4)

    @pytest.mark.parametrize("mass", [0.0, -1.0])
    def test_nonpositive_mass(self, mass):
        with pytest.raises(ValueError):
            project_simplex([1.0, 2.0], mass)

    def test_rows(self):
        v = np.array([[0.6, 0.4, 0.2], [2.0, 0.0, -1.0]])
        out = project_simplex(v, [1.0, 2.0])
        np.testing.assert_allclose(out[0], project_simplex(v[0]))
        np.testing.assert_allclose(out[1], project_simplex(v[1], 2.0))

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(0.01, 10))
    @settings(max_examples=200, deadline=None)
    def test_projection_is_optimal(self, values, mass):
        v = np.array(values)
        x = project_simplex(v, mass)
        assert np.all(x >= 0) and x.sum() == pytest.approx(mass, rel=1e-12, abs=1e-12)
        # Optimality: v - x is constant on the support and not larger off it.
        g = v - x
        support = x > 0
        assert np.ptp(g[support]) <= 1e-9 * max(1.0, np.abs(v).max())
        if np.any(~support):
            assert g[~support].max() <= g[support].min() + 1e-9 * max(1.0, np.abs(v).max())


def test_threshold_kink_is_reached():
    # Revenue 2 per unit until 1, flat beyond: optimum sits at the kink.
    prob = ProxProblem((threshold(2.0, 1.0),), [0.0], [0.0], 0.01)
    sol = solve_prox(prob)
    assert sol.amounts[0] == pytest.approx(1.0, abs=1e-12)


def test_log_utility_closed_form():
    # min -log(1+a) + eta/2 a^2 with eta=1 gives a^2 + a - 1 = 0.
    sol = solve_prox(ProxProblem((Utility("log", rate=1.0),), [0.0], [0.0], 1.0))
    assert sol.amounts[0] == pytest.approx((np.sqrt(5) - 1) / 2, abs=1e-12)
