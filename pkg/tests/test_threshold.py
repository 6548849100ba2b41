import numpy as np
import pytest
from conftest import cap, const_cost

from stopping_thresholds.discretize import check_fn_convergence
from stopping_thresholds.errors import (
    AssumptionViolatedError,
    BracketNotFoundError,
    MethodInapplicableError,
)
from stopping_thresholds.ladder import ladder_stats_exact_skipfree
from stopping_thresholds.model import eval_payoff
from stopping_thresholds.settings import (
    CostSpec,
    FiniteChainSpec,
    MCConfig,
    PayoffSpec,
    ProblemSpec,
    StepDistribution,
)
from stopping_thresholds.threshold import (
    FCurve,
    evaluate_f,
    evaluate_f_curve,
    evaluate_f_levy,
    find_root,
    random_walk_threshold,
    robust_sign,
    validate_assumption2,
    value_of_levy_threshold,
    value_of_threshold,
)


def test_f_on_the_benchmark(skipfree_problem, mc):
    assert evaluate_f(skipfree_problem, 3.0, mc) == pytest.approx((0.4, 0.0))
    f, ci = evaluate_f(skipfree_problem, 4.9, mc)
    assert f == pytest.approx(-0.05)
    assert ci == 0.0
    assert evaluate_f(skipfree_problem, 7.0, mc)[0] == pytest.approx(-0.1)


def test_weighted_variant_divides_by_weight(skipfree_problem, mc):
    weighted = skipfree_problem.model_copy(update={"weight": const_cost(2.0)})
    assert evaluate_f(weighted, 3.0, mc)[0] == pytest.approx(0.4 / 2.0)


def test_levy_f_needs_its_own_entry_point(bm_problem, mc):
    with pytest.raises(MethodInapplicableError):
        evaluate_f(bm_problem, 0.0, mc)


def test_random_walk_threshold_exact(skipfree_walk, skipfree_problem, mc):
    th = random_walk_threshold(skipfree_walk, skipfree_problem, mc, bracket=(-10, 10))
    assert th.x_bar == pytest.approx(4.8, abs=1e-8)
    assert th.boundary == "nonstrict"
    assert th.method == "exact_skipfree"
    assert th.assumption2.status == "certified"
    assert th.stops(5.0) and not th.stops(4.0)


def test_find_root_agrees_with_random_walk_path(skipfree_problem, mc):
    th = find_root(skipfree_problem, (-10.0, 10.0), mc, tol=1e-9)
    assert th.x_bar == pytest.approx(4.8, abs=1e-8)


def test_threshold_is_scale_invariant(skipfree_walk, skipfree_problem, mc):
    scaled = ProblemSpec(
        process=skipfree_walk, payoff=cap(5, scale=3.0), cost=const_cost(0.3)
    )
    a = random_walk_threshold(skipfree_walk, skipfree_problem, mc, bracket=(-10, 10))
    b = random_walk_threshold(skipfree_walk, scaled, mc, bracket=(-10, 10))
    assert b.x_bar == pytest.approx(a.x_bar, abs=1e-8)


def test_bracket_without_sign_change(skipfree_problem, mc):
    with pytest.raises(BracketNotFoundError):
        find_root(skipfree_problem, (5.0, 10.0), mc)
    with pytest.raises(BracketNotFoundError):
        find_root(skipfree_problem, (-10.0, 3.0), mc)


def test_randomized_capped_instances(mc):
    rng = np.random.default_rng(2024)
    for _ in range(10):
        p_up = rng.uniform(0.55, 0.9)
        k = int(rng.integers(2, 9))
        c = rng.uniform(0.01, 0.45) * (2 * p_up - 1)
        walk = StepDistribution(kind="two_point", params={"p": p_up})
        p = ProblemSpec(process=walk, payoff=cap(k), cost=const_cost(c))
        th = random_walk_threshold(walk, p, mc, bracket=(-10, 10))
        assert th.x_bar == pytest.approx(k - c / (2 * p_up - 1), abs=1e-7)


def test_convex_payoff_is_rejected(skipfree_walk, mc):
    p = ProblemSpec(
        process=skipfree_walk,
        payoff=PayoffSpec(kind="exponential", params={"rate": 4.0}),
        cost=const_cost(0.5),
    )
    grid = np.linspace(-10.0, 10.0, 41)
    curve = evaluate_f_curve(p, grid, mc)
    assert curve.method == "exact_skipfree"
    assert validate_assumption2(curve).status == "violated"


def test_decreasing_cost_is_rejected(skipfree_walk, mc):
    p = ProblemSpec(
        process=skipfree_walk,
        payoff=cap(5),
        cost=CostSpec(kind="affine_positive", params={"a": 1.0, "b": -0.1}),
    )
    with pytest.raises(AssumptionViolatedError):
        random_walk_threshold(skipfree_walk, p, mc, bracket=(-5, 5))


def test_assumption2_report_shapes():
    grid = np.arange(5.0)
    certified = FCurve(grid, np.array([2.0, 1.0, 0.5, -0.1, -0.2]), np.zeros(5), "standard")
    report = validate_assumption2(certified)
    assert report.status == "certified"
    assert report.sign_change == (2.0, 3.0)

    twice = FCurve(grid, np.array([1.0, -1.0, 1.0, -1.0, -1.0]), np.zeros(5), "standard")
    assert validate_assumption2(twice).status == "violated"

    flat = FCurve(grid, np.zeros(5), np.full(5, 0.1), "standard")
    with pytest.raises(BracketNotFoundError):
        validate_assumption2(flat)

    assert robust_sign(0.5, 0.4) == 1
    assert robust_sign(0.5, 0.6) == 0


def test_pooled_gaussian_threshold():
    walk = StepDistribution(kind="gaussian", params={"m": 0.5, "s": 1.0})
    p = ProblemSpec(process=walk, payoff=cap(5), cost=const_cost(0.1))
    cfg = MCConfig(paths=4000, seed=99)
    th = random_walk_threshold(walk, p, cfg, bracket=(-5, 8), tol=1e-3)
    assert th.method == "monte_carlo_pooled"
    assert 3.0 < th.x_bar < 5.0


def test_chain_threshold_scans_states():
    states = [0, 1, 2, 3, 4, 5, 6]
    kernel = np.zeros((7, 7))
    for i in range(6):
        kernel[i, i + 1] = 0.7
        kernel[i, max(i - 1, 0)] += 0.3
    kernel[6, 6] = 1.0
    chain = FiniteChainSpec(states=states, kernel=kernel.tolist())
    p = ProblemSpec(process=chain, payoff=cap(4), cost=const_cost(0.1))
    th = find_root(p, (0.0, 6.0), MCConfig())
    assert th.x_bar == 4.0
    assert th.boundary == "nonstrict"
    assert th.method == "exact_chain"


def test_value_of_threshold_and_ladder_sum(skipfree_problem, mc):
    value = value_of_threshold(skipfree_problem, 4.8, "nonstrict", 0.0, mc)
    assert abs(value.value - 4.0) <= 4.0 * value.stderr
    # skip-free: every epoch gains psi = 0.8 and the sum is exact
    assert value.ladder_sum == pytest.approx(4.0)
    assert value.censored_fraction == 0.0


def test_value_inside_stopping_region(skipfree_problem, mc):
    value = value_of_threshold(skipfree_problem, 4.8, "nonstrict", 6.0, mc)
    assert value.value == 5.0
    assert value.stderr == 0.0


def test_levy_threshold_function(bm, bm_problem, mc):
    assert evaluate_f_levy(bm, bm_problem, 0.0, mc) == pytest.approx((0.0, 0.0), abs=1e-12)
    f, _ = evaluate_f_levy(bm, bm_problem, 1.0, mc)
    assert f == pytest.approx(1.0 / (1.0 + np.exp(1.0)) - 0.5)


def test_brownian_root(bm_problem, mc):
    th = find_root(bm_problem, (-5.0, 5.0), mc, tol=1e-7)
    assert th.x_bar == pytest.approx(0.0, abs=1e-6)
    assert th.method == "analytic_bm"


def test_continuum_value(bm, bm_problem):
    cfg = MCConfig(paths=100_000, seed=17)
    value, ci = value_of_levy_threshold(bm, bm_problem, 0.0, -1.0, cfg)
    assert abs(value - (-np.log(2.0) - 0.5)) <= 1.6 * ci


def test_epoch_gain_is_non_increasing(skipfree_walk, skipfree_problem):
    ys = np.linspace(-3.0, 7.0, 41)
    phi = np.array(
        [ladder_stats_exact_skipfree(skipfree_walk, skipfree_problem, y).phi for y in ys]
    )
    gain = phi - eval_payoff(skipfree_problem.payoff, ys)
    assert np.all(np.diff(gain) <= 1e-12)
    assert gain[0] == pytest.approx(0.8)
    assert gain[-1] == pytest.approx(-0.2)


@pytest.mark.parametrize("y", [-2.0, 0.0, 2.0, 4.0, 4.5])
def test_threshold_rule_dominates_payoff(skipfree_walk, skipfree_problem, mc, y):
    th = random_walk_threshold(skipfree_walk, skipfree_problem, mc, bracket=(-10, 10))
    value = value_of_threshold(skipfree_problem, th.x_bar, th.boundary, y, mc)
    assert value.value + 3.0 * value.stderr >= float(eval_payoff(skipfree_problem.payoff, y))


def test_difference_backend_matches_closed_form(bm, bm_problem, mc):
    cfg = MCConfig(paths=20_000, seed=13, skeleton_dt=2.0**-10)
    conv = check_fn_convergence(bm, bm_problem, [3, 4], [-1.0, 1.0], mc)
    for j, x in enumerate([-1.0, 1.0]):
        f, ci = evaluate_f_levy(bm, bm_problem, x, cfg, backend="difference")
        exact, _ = evaluate_f_levy(bm, bm_problem, x, cfg, backend="analytic")
        assert ci > 0.0
        assert abs(f - exact) <= ci + 0.02
        # the level-4 grid walk sees the same generator up to its residual
        assert abs(f - conv.f_n[-1][j]) <= ci + conv.residuals[-1][j] + 0.02
