import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netgov.num import (
    ConvergenceError,
    DomainError,
    RateProblem,
    RateSolution,
    UtilitySpec,
    inverse_marginal,
    marginal_utility,
    solve_num,
    utility_value,
    verify_kkt,
)

from .conftest import grid_oracle

LOG = UtilitySpec("log", 1.0)


def shared_link():
    return RateProblem(routes=[[0], [0]], capacities=[2.0], utilities=[LOG, LOG])


def two_link_line():
    # f0 crosses both links, f1 only link 0, f2 only link 1
    return RateProblem(routes=[[0, 1], [0], [1]], capacities=[1.0, 1.0], utilities=[LOG, LOG, LOG])


def random_problem(rng):
    n_src = int(rng.integers(1, 4))
    n_link = int(rng.integers(1, 4))
    routes = [sorted(rng.choice(n_link, int(rng.integers(1, n_link + 1)), replace=False).tolist())
              for _ in range(n_src)]
    caps = rng.uniform(0.5, 5.0, n_link).tolist()
    utils = []
    for _ in range(n_src):
        if rng.random() < 0.5:
            utils.append(UtilitySpec("log", float(rng.uniform(0.5, 2.0))))
        else:
            utils.append(UtilitySpec("alpha-fair", float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 3.0))))
    return RateProblem(routes, caps, utils)


class TestUtility:
    def test_log_at_one(self):
        assert utility_value(LOG, 1.0) == 0.0

    def test_alpha_two(self):
        assert utility_value(UtilitySpec("alpha-fair", 1.0, 2.0), 2.0) == pytest.approx(-0.5)

    def test_alpha_half(self):
        assert utility_value(UtilitySpec("alpha-fair", 3.0, 0.5), 4.0) == pytest.approx(12.0)

    def test_alpha_one_is_log(self):
        spec = UtilitySpec("alpha-fair", 2.0, 1.0)
        assert utility_value(spec, 3.0) == pytest.approx(2.0 * math.log(3.0))
        assert inverse_marginal(spec, 4.0) == pytest.approx(0.5)

    @pytest.mark.parametrize("x", [0.0, -1.0])
    def test_domain(self, x):
        with pytest.raises(DomainError):
            utility_value(LOG, x)

    def test_alpha_zero_rejected(self):
        with pytest.raises(ValueError):
            UtilitySpec("alpha-fair", 1.0, 0.0)


class TestInverseMarginal:
    def test_log(self):
        assert inverse_marginal(LOG, 2.0) == 0.5

    def test_alpha_two(self):
        assert inverse_marginal(UtilitySpec("alpha-fair", 1.0, 2.0), 4.0) == pytest.approx(0.5)

    @pytest.mark.parametrize("spec", [LOG, UtilitySpec("log", 3.0), UtilitySpec("alpha-fair", 2.0, 2.5),
                                      UtilitySpec("alpha-fair", 0.7, 0.5)])
    @pytest.mark.parametrize("x", [0.1, 1.0, 10.0])
    def test_round_trip(self, spec, x):
        assert inverse_marginal(spec, marginal_utility(spec, x)) == pytest.approx(x, rel=1e-12)

    @pytest.mark.parametrize("q", [0.0, -2.0])
    def test_domain(self, q):
        with pytest.raises(DomainError):
            inverse_marginal(LOG, q)

    @given(w=st.floats(0.1, 10), a=st.floats(0.2, 5), x1=st.floats(0.01, 100), x2=st.floats(0.01, 100))
    def test_concave_increasing(self, w, a, x1, x2):
        spec = UtilitySpec("alpha-fair", w, a)
        lo, hi = sorted((x1, x2))
        if hi - lo < 1e-6 * hi:
            return
        assert utility_value(spec, hi) > utility_value(spec, lo)
        assert marginal_utility(spec, hi) < marginal_utility(spec, lo)


class TestSolve:
    def test_symmetric_shared_link(self):
        sol = solve_num(shared_link())
        assert sol.rates == pytest.approx([1.0, 1.0], abs=1e-4)

    def test_single_source(self):
        problem = RateProblem([[0]], [5.0], [LOG])
        sol = solve_num(problem)
        assert sol.rates[0] == pytest.approx(5.0, abs=1e-4)
        assert sol.prices[0] == pytest.approx(0.2, abs=1e-5)

    def test_two_link_line(self):
        sol = solve_num(two_link_line())
        assert sol.rates == pytest.approx([1 / 3, 2 / 3, 2 / 3], abs=1e-3)
        assert sol.prices == pytest.approx([1.5, 1.5], abs=1e-3)
        assert verify_kkt(two_link_line(), sol, 1e-6).passed

    def test_two_link_line_grid_oracle(self):
        problem = two_link_line()
        sol = solve_num(problem)
        assert problem.objective(sol.rates) >= grid_oracle(problem) - 1e-3

    def test_non_convergence(self):
        with pytest.raises(ConvergenceError) as info:
            solve_num(two_link_line(), max_iter=5)
        assert info.value.residual > 0

    def test_invalid_problems(self):
        with pytest.raises(ValueError):
            RateProblem([[0]], [0.0], [LOG])
        with pytest.raises(ValueError):
            RateProblem([[]], [1.0], [LOG])
        with pytest.raises(ValueError):
            RateProblem([[3]], [1.0], [LOG])

    @pytest.mark.parametrize("seed", range(8))
    def test_random_problems_beat_grid_oracle(self, seed):
        problem = random_problem(np.random.default_rng(seed))
        sol = solve_num(problem)
        assert verify_kkt(problem, sol, 1e-6).passed
        assert problem.objective(sol.rates) >= grid_oracle(problem) - 1e-3

    def test_steep_demand_does_not_oscillate(self):
        # at the default step a fixed-step price update overshoots here forever
        spec = UtilitySpec("alpha-fair", 0.7949, 1.972)
        problem = RateProblem([[0]], [4.1719], [spec])
        sol = solve_num(problem)
        assert sol.rates[0] == pytest.approx(4.1719, rel=1e-6)
        assert sol.prices[0] == pytest.approx(marginal_utility(spec, 4.1719), rel=1e-5)

    @given(seed=st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_random_problems_converge(self, seed):
        problem = random_problem(np.random.default_rng(seed))
        assert verify_kkt(problem, solve_num(problem), 1e-6).passed

    @pytest.mark.parametrize("k", [0.5, 3.0])
    def test_scale_equivariance(self, k):
        base = solve_num(two_link_line())
        scaled = solve_num(RateProblem([[0, 1], [0], [1]], [k, k], [LOG, LOG, LOG]))
        assert scaled.rates == pytest.approx(k * base.rates, rel=1e-4)

    def test_weight_monotonicity(self):
        rates = []
        for w in (0.5, 1.0, 2.0, 4.0):
            problem = RateProblem([[0, 1], [0], [1]], [1.0, 1.0], [UtilitySpec("log", w), LOG, LOG])
            rates.append(solve_num(problem).rates[0])
        assert all(b >= a for a, b in zip(rates, rates[1:]))

    def test_solution_invariants(self):
        problem = two_link_line()
        sol = solve_num(problem)
        load = problem.incidence.T @ sol.rates
        c = np.asarray(problem.capacities)
        assert np.all(load <= c * (1 + 1e-6))
        assert np.all(sol.prices >= 0)
        assert np.all(np.abs(sol.prices * (c - load)) <= 1e-6 * c)


class TestVerifyKKT:
    def test_passes_on_optimum(self):
        sol = RateSolution(np.array([1.0, 1.0]), np.array([1.0]), 0, 0.0)
        assert verify_kkt(shared_link(), sol).passed

    def test_reports_infeasibility(self):
        sol = RateSolution(np.array([2.0, 2.0]), np.array([0.5]), 0, 0.0)
        report = verify_kkt(shared_link(), sol)
        assert not report.passed
        assert any("exceeds capacity" in v for v in report.violations)

    def test_hand_solved_line(self):
        sol = RateSolution(np.array([1 / 3, 2 / 3, 2 / 3]), np.array([1.5, 1.5]), 0, 0.0)
        assert verify_kkt(two_link_line(), sol, 1e-6).passed

    def test_reports_stationarity_and_slackness(self):
        sol = RateSolution(np.array([0.5, 0.5]), np.array([1.0]), 0, 0.0)
        report = verify_kkt(shared_link(), sol)
        assert any("marginal utility" in v for v in report.violations)
        assert any("slackness" in v for v in report.violations)

    def test_negative_price(self):
        sol = RateSolution(np.array([1.0, 1.0]), np.array([-1.0]), 0, 0.0)
        assert any("negative price" in v for v in verify_kkt(shared_link(), sol).violations)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            verify_kkt(shared_link(), RateSolution(np.array([1.0]), np.array([1.0]), 0, 0.0))
