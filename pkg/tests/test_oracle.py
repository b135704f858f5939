import numpy as np
import pytest

from consensus_ot.errors import InstanceError, OracleError
from consensus_ot.model import (Edge, LinearEqualityInstance, SourceSpec, TargetSpec, build_instance, linear,
                                quadratic)
from consensus_ot.oracle import (grid_maximize, grid_search_oracle, northwest_corner, simplex_max,
                                 solve_convex, solve_lp_centralized, solve_oracle)

from conftest import random_balanced, random_bounded_instance


class TestLP:
    def test_single_pair(self):
        lin = LinearEqualityInstance([1.0], [1.0], [[0.7]], [[0.4]])
        res = solve_lp_centralized(lin)
        assert res.plan.tolist() == [1.0]
        assert res.value == pytest.approx(1.1, abs=1e-15)

    def test_diagonal(self, diag2):
        res = solve_lp_centralized(diag2)
        assert res.value == pytest.approx(2.0, abs=1e-12)
        np.testing.assert_allclose(res.plan, [0.5, 0.0, 0.0, 0.5], atol=1e-12)

    def test_diagonal_by_vertex_enumeration(self, diag2):
        # The 2x2 polytope is the segment plan = [[t, .5-t], [.5-t, t]], t in [0, .5].
        ts = np.array([0.0, 0.5])
        values = [diag2.primal_value(np.array([[t, 0.5 - t], [0.5 - t, t]])) for t in ts]
        assert solve_lp_centralized(diag2).value == pytest.approx(max(values), abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_self_certification(self, seed):
        rng = np.random.default_rng(seed)
        n, m = rng.integers(1, 7, size=2)
        lin = random_balanced(rng, n, m)
        res = solve_lp_centralized(lin)
        plan = res.plan.reshape(n, m)
        assert plan.min() >= -1e-12
        np.testing.assert_allclose(plan.sum(axis=1), lin.p, atol=1e-9)
        np.testing.assert_allclose(plan.sum(axis=0), lin.q, atol=1e-9)
        reduced = res.u[:, None] + res.v[None, :] - lin.surplus
        assert reduced.min() >= -1e-9
        assert np.abs(reduced[plan > 1e-12]).max(initial=0.0) <= 1e-9
        assert abs(res.value - res.dual_value) <= 1e-9 * max(1.0, abs(res.value))
        nw = northwest_corner(lin.p, lin.q)
        assert res.value >= lin.primal_value(nw) - 1e-12

    def test_twenty_by_twenty_dominates_northwest_corner(self):
        lin = random_balanced(np.random.default_rng(2), 20, 20)
        res = solve_lp_centralized(lin)
        assert res.value >= lin.primal_value(northwest_corner(lin.p, lin.q))
        assert abs(res.value - res.dual_value) <= 1e-9 * res.value

    def test_unbalanced_rejected(self):
        with pytest.raises(InstanceError):
            LinearEqualityInstance([1.0, 1.0], [1.0], [[1.0], [1.0]], [[1.0], [1.0]])
        inst = build_instance([TargetSpec("x", 1, 1)], [SourceSpec("y", 2, 2)], [Edge("x", "y", linear(1), linear(1))])
        with pytest.raises(OracleError, match="unbalanced"):
            solve_lp_centralized(inst)

    def test_nonlinear_rejected(self):
        inst = build_instance([TargetSpec("x", 0, 1)], [SourceSpec("y", 0, 1)],
                              [Edge("x", "y", quadratic(1.0), linear(1))])
        with pytest.raises(OracleError, match="linear"):
            solve_lp_centralized(inst)

    def test_simplex_with_inequalities(self):
        # max x + y s.t. x + 2y <= 4, 3x + y <= 6: optimum (1.6, 1.2).
        sol = simplex_max([1.0, 1.0], A_ub=[[1.0, 2.0], [3.0, 1.0]], b_ub=[4.0, 6.0])
        np.testing.assert_allclose(sol.x, [1.6, 1.2], atol=1e-12)
        assert sol.value == pytest.approx(2.8, abs=1e-12)

    def test_simplex_infeasible(self):
        with pytest.raises(OracleError):
            simplex_max([1.0], A_eq=[[1.0]], b_eq=[1.0], A_ub=[[1.0]], b_ub=[0.5])


class TestGrid:
    def test_zero_dimensional(self):
        inst = build_instance([TargetSpec("x", 1, 1)], [SourceSpec("a", 0.6, 0.6), SourceSpec("b", 0.4, 0.4)],
                              [Edge("x", "a", quadratic(3.0), linear(-1)), Edge("x", "b", linear(5), quadratic(1.0))])
        res = grid_search_oracle(inst, 1e-4)
        np.testing.assert_allclose(res.plan, [0.6, 0.4], atol=1e-12)

    def test_diagonal(self, diag2):
        res = grid_search_oracle(diag2.to_problem(), 1e-4)
        assert abs(res.value - 2.0) <= 2e-4

    def test_symmetric_quadratic_split(self):
        inst = build_instance([TargetSpec("x", 1, 1)], [SourceSpec("a", 0, 10), SourceSpec("b", 0, 10)],
                              [Edge("x", "a", quadratic(1.0), linear(0)), Edge("x", "b", quadratic(1.0), linear(0))])
        res = grid_search_oracle(inst, 1e-4)
        np.testing.assert_allclose(res.plan, [0.5, 0.5], atol=1e-4)
        assert res.value == pytest.approx(-0.5, abs=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_agrees_with_lp_on_linear_instances(self, seed):
        rng = np.random.default_rng(seed)
        inst = random_bounded_instance(rng, 2, 2, families=("linear",), density=0.5)
        if inst.n_edges > 4:
            pytest.skip("too many free dimensions")
        lp = solve_lp_centralized(inst)
        grid = grid_search_oracle(inst, 1e-4)
        assert lp.value >= grid.value - 1e-9
        assert lp.value - grid.value <= grid.error_bound + 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_agrees_with_conic_solver(self, seed):
        rng = np.random.default_rng(200 + seed)
        inst = random_bounded_instance(rng, 2, 2, families=("quadratic", "log", "linear"), density=0.6)
        grid = grid_search_oracle(inst, 1e-6)
        conic = solve_convex(inst)
        assert abs(grid.value - conic.value) <= 1e-5 * max(1.0, abs(conic.value))

    def test_too_many_free_dimensions(self):
        inst = random_bounded_instance(np.random.default_rng(0), 3, 3, density=1.0)
        with pytest.raises(OracleError, match="free"):
            grid_search_oracle(inst)

    def test_empty_grid_reported(self):
        with pytest.raises(OracleError):
            grid_maximize(lambda x: x.sum(axis=1), 1, 0.1, A_ub=[[1.0]], b_ub=[-1.0], upper=[1.0])

    def test_dispatch(self, diag2):
        assert solve_oracle(diag2.to_problem()).method == "simplex"
        inst = random_bounded_instance(np.random.default_rng(1), 2, 2, families=("quadratic",), density=0.5)
        assert solve_oracle(inst).method in ("grid", "conic")
