import math

import numpy as np
import pytest
from conftest import CONFIG_DIR, cap, const_cost
from scipy import integrate
from scipy.special import expit

from stopping_thresholds.errors import MethodInapplicableError
from stopping_thresholds.oracle.brownian import (
    bm_green_expected_cost,
    bm_hat,
    bm_interval_expected_cost,
    bm_scale_exit,
)
from stopping_thresholds.oracle.dp import (
    dp_threshold_equivalence,
    dp_value_iteration,
    solve_dp,
)
from stopping_thresholds.oracle.identities import (
    check_ladder_sum_identity,
    check_max_representation,
)
from stopping_thresholds.settings import (
    AppConfig,
    CostSpec,
    LookupTable,
    MCConfig,
    ProblemSpec,
    StepDistribution,
)
from stopping_thresholds.threshold import find_root, random_walk_threshold


def flat_table_cost(c: float) -> CostSpec:
    table = LookupTable(x=[-100.0, 100.0], y=[c, c], extrapolate="clamp")
    return CostSpec(kind="lookup_table", table=table)


def test_scale_exit_half_cell():
    p_up, e_time = bm_scale_exit(1.0, 1.0, -0.5, 0.5, 0.0)
    assert p_up == pytest.approx(0.731059, abs=1e-6)
    assert e_time == pytest.approx(0.231059, abs=1e-6)


def test_scale_exit_degenerate_cases():
    assert bm_scale_exit(2.0, 0.0, -1.0, 1.0, 0.0) == (1.0, 0.5)
    p_up, e_time = bm_scale_exit(0.0, 1.0, -1.0, 1.0, 0.0)
    assert p_up == pytest.approx(0.5)
    assert e_time == pytest.approx(1.0)
    with pytest.raises(ValueError):
        bm_scale_exit(1.0, -1.0, -1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        bm_scale_exit(1.0, 1.0, -1.0, 1.0, 2.0)


@pytest.mark.parametrize(
    "y, c, expected",
    [(1.0, 0.5, 0.5), (4.0, 0.5, 2.0)],
)
def test_green_cost_of_constant_rate(y, c, expected):
    assert bm_green_expected_cost(1.0, 1.0, 0.0, y, const_cost(c)) == pytest.approx(expected)
    assert bm_green_expected_cost(1.0, 1.0, 0.0, y, flat_table_cost(c)) == pytest.approx(
        expected, abs=1e-6
    )


def test_green_cost_argument_checks():
    assert bm_green_expected_cost(1.0, 1.0, 2.0, 2.0, const_cost(1.0)) == 0.0
    with pytest.raises(ValueError):
        bm_green_expected_cost(1.0, 1.0, 3.0, 2.0, const_cost(1.0))
    with pytest.raises(ValueError):
        bm_green_expected_cost(-1.0, 1.0, 0.0, 2.0, const_cost(1.0))


def test_interval_cost_of_unit_rate_is_exit_time():
    _, e_time = bm_scale_exit(1.0, 1.0, -0.5, 0.5, 0.0)
    cost = bm_interval_expected_cost(1.0, 1.0, -0.5, 0.5, 0.0, flat_table_cost(1.0))
    assert cost == pytest.approx(e_time, abs=1e-6)


def test_hat_of_flat_table():
    assert bm_hat(1.0, 1.0, 0.0, flat_table_cost(0.5)) == pytest.approx(0.5, abs=1e-6)


def test_dp_on_capped_benchmark(skipfree_walk, skipfree_problem, mc):
    solution = solve_dp(skipfree_problem, guess=4.8)
    assert solution.value_at(0.0) == pytest.approx(4.0, abs=1e-6)
    assert solution.boundary_layer == 1
    interior = solution.interior()
    stopping = solution.states[solution.stopping_set & interior]
    assert stopping.min() == pytest.approx(5.0)
    assert np.all(solution.stopping_set[interior] == (solution.states[interior] >= 5.0 - 1e-9))
    assert np.all(np.diff(solution.values) >= -1e-12)

    th = random_walk_threshold(skipfree_walk, skipfree_problem, mc, bracket=(-10, 10))
    verdict = dp_threshold_equivalence(solution, th)
    assert verdict.matches
    assert verdict.verdict == "stopping_set matches threshold rule"


def test_penalty_boundary_is_below_plain_reflection(skipfree_problem):
    plain = dp_value_iteration(skipfree_problem, (-30.0, 10.0), lower_boundary="reflect")
    penalized = dp_value_iteration(skipfree_problem, (-30.0, 10.0))
    assert penalized.lower_boundary == "reflect_penalty"
    assert np.all(penalized.values <= plain.values + 1e-12)
    assert penalized.value_at(0.0) == pytest.approx(4.0, abs=1e-6)
    assert plain.value_at(0.0) == pytest.approx(4.0, abs=1e-6)


def test_penalty_makes_deep_descent_bad():
    downhill = StepDistribution(kind="two_point", params={"p": 0.3})
    p = ProblemSpec(process=downhill, payoff=cap(5), cost=const_cost(0.05))
    penalized = dp_value_iteration(p, (-10.0, 10.0))
    assert penalized.values[0] == pytest.approx(penalized.gamma[0], abs=1e-9)
    assert penalized.stopping_set[0]
    # without the charge, waiting at lo for an upward step beats stopping
    plain = dp_value_iteration(p, (-10.0, 10.0), lower_boundary="reflect")
    assert plain.values[0] > plain.gamma[0] + 0.5

    with pytest.raises(ValueError):
        dp_value_iteration(p, (-10.0, 10.0), lower_boundary="absorb")


def test_dp_on_finite_chain():
    cfg = AppConfig.load(str(CONFIG_DIR / "chain_walk.json"))
    solution = solve_dp(cfg.problem, guess=0.0)
    th = find_root(cfg.problem, cfg.solve.bracket, cfg.mc)
    assert th.x_bar == 4.0
    assert dp_threshold_equivalence(solution, th).matches


def test_dp_rejects_continuous_walks():
    walk = StepDistribution(kind="gaussian", params={"m": 0.5, "s": 1.0})
    p = ProblemSpec(process=walk, payoff=cap(5), cost=const_cost(0.1))
    with pytest.raises(MethodInapplicableError):
        solve_dp(p, guess=4.0)


def test_dp_agrees_with_threshold_on_random_instances(mc):
    rng = np.random.default_rng(7)
    for _ in range(10):
        p_up = float(rng.uniform(0.55, 0.9))
        k = int(rng.integers(2, 9))
        c = float(rng.uniform(0.01, 0.45)) * (2 * p_up - 1)
        walk = StepDistribution(kind="two_point", params={"p": p_up})
        p = ProblemSpec(process=walk, payoff=cap(k), cost=const_cost(c))
        th = random_walk_threshold(walk, p, mc, bracket=(-10, 10))
        solution = solve_dp(p, guess=th.x_bar)
        verdict = dp_threshold_equivalence(solution, th)
        assert verdict.matches, (p_up, k, c, verdict.mismatched_states)


@pytest.mark.slow
def test_max_representation_holds_for_brownian_motion(bm, bm_problem):
    cfg = MCConfig(paths=20_000, seed=404)
    report = check_max_representation(bm, bm_problem, -1.0, 2.0, cfg)
    assert report.method == "inverse_gaussian_levels"
    assert report.lhs == pytest.approx(-math.log1p(math.exp(1.0)))
    assert report.passed


@pytest.mark.slow
def test_max_representation_detects_wrong_f(bm, bm_problem):
    cfg = MCConfig(paths=20_000, seed=404)
    report = check_max_representation(
        bm, bm_problem, -1.0, 2.0, cfg, f=lambda y: float(expit(-y)) + 0.5
    )
    # f is off by 1 and the passage takes 3 time units on average
    assert report.residual == pytest.approx(-3.0, abs=0.1)
    assert not report.passed


def test_ladder_sum_identity_conventions(skipfree_problem, mc):
    strict = check_ladder_sum_identity(skipfree_problem, 0.0, 4.8, mc)
    assert strict.rhs == pytest.approx(4.0)
    assert strict.passed

    nonstrict = check_ladder_sum_identity(skipfree_problem, 0.0, 4.8, mc, convention="nonstrict")
    # the epoch at the stopping time gains psi(5) = -0.2
    assert nonstrict.residual == pytest.approx(-0.2, abs=0.02)
    assert not nonstrict.passed


@pytest.mark.parametrize(
    "mu, sigma, a, b, x",
    [
        (1.0, 1.0, -0.5, 0.5, 0.0),
        (2.0, 1.0, -1.0, 1.0, 0.2),
        (-0.7, 1.3, -2.0, 1.0, 0.5),
        (0.3, 2.0, 0.0, 4.0, 1.0),
    ],
)
def test_scale_exit_is_an_exponential_martingale(mu, sigma, a, b, x):
    theta = 2.0 * mu / sigma**2
    p_up, _ = bm_scale_exit(mu, sigma, a, b, x)
    expected = p_up * math.exp(-theta * b) + (1.0 - p_up) * math.exp(-theta * a)
    assert expected == pytest.approx(math.exp(-theta * x), rel=1e-12)


@pytest.mark.parametrize("mu", [1.0, 2.0])
@pytest.mark.parametrize("x, y", [(-1.0, 0.0), (0.0, 2.0)])
def test_hat_integrates_to_passage_cost(mu, x, y):
    h = CostSpec(kind="affine_positive", params={"a": 0.5, "b": 0.2})
    integral, _ = integrate.quad(lambda z: bm_hat(mu, 1.0, z, h), x, y)
    assert integral / mu == pytest.approx(bm_green_expected_cost(mu, 1.0, x, y, h), rel=1e-3)


def test_ladder_sum_identity_on_a_single_epoch(skipfree_problem, mc):
    report = check_ladder_sum_identity(skipfree_problem, 2.0, 2.0, mc)
    # one epoch from 2 to 3: gamma(2) + psi(2) = 2 + 0.8
    assert report.rhs == pytest.approx(2.8)
    assert report.residual == pytest.approx(0.0, abs=0.02)
    assert report.passed


@pytest.mark.slow
def test_identity_z_scores_are_calibrated(skipfree_problem):
    extreme = 0
    for seed in range(50):
        cfg = MCConfig(paths=2000, seed=1000 + seed)
        report = check_ladder_sum_identity(skipfree_problem, 0.0, 4.8, cfg)
        extreme += abs(report.z) > 3.0
    assert extreme <= 2
