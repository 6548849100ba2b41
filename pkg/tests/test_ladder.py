import numpy as np
import pytest
from conftest import cap, const_cost
from scipy.stats import norm

from stopping_thresholds.errors import (
    EstimationFailedError,
    LadderEpochNotIntegrableError,
    MethodInapplicableError,
)
from stopping_thresholds.ladder import (
    _skeleton_hat,
    hat_transform,
    ladder_stats,
    ladder_stats_exact_skipfree,
    ladder_stats_finite_chain,
    ladder_stats_mc,
    ladder_stats_pooled,
    passage_calibration,
    pooled_excursions,
)
from stopping_thresholds.oracle.brownian import bm_hat
from stopping_thresholds.sample_store import ExcursionStore, PooledExcursions
from stopping_thresholds.settings import (
    CostSpec,
    FiniteChainSpec,
    JumpLaw,
    LevySpec,
    LookupTable,
    MCConfig,
    PayoffSpec,
    ProblemSpec,
    StepDistribution,
)


def flat_table_cost(c: float) -> CostSpec:
    table = LookupTable(x=[-100.0, 100.0], y=[c, c], extrapolate="clamp")
    return CostSpec(kind="lookup_table", table=table)


def test_skipfree_closed_form(skipfree_walk, skipfree_problem):
    stats = ladder_stats_exact_skipfree(skipfree_walk, skipfree_problem, 3.0)
    assert stats.e_tau_plus == pytest.approx(2.0)
    assert stats.e_cost == pytest.approx(0.2)
    assert stats.phi == pytest.approx(3.8)
    assert stats.exact


def test_skipfree_truncated_system_matches_wald(skipfree_walk):
    p = ProblemSpec(process=skipfree_walk, payoff=cap(5), cost=flat_table_cost(0.1))
    stats = ladder_stats_exact_skipfree(skipfree_walk, p, 3.0)
    assert stats.e_cost == pytest.approx(0.2, abs=1e-10)
    assert stats.truncation_bound < 1e-12


def test_skipfree_rejects_other_walks(skipfree_problem):
    jumpy = StepDistribution(kind="lattice_pmf", support=[2, -1], probs=[0.5, 0.5])
    with pytest.raises(MethodInapplicableError):
        ladder_stats_exact_skipfree(jumpy, skipfree_problem, 0.0)

    downhill = StepDistribution(kind="two_point", params={"p": 0.4})
    p = skipfree_problem.model_copy(update={"process": downhill})
    with pytest.raises(LadderEpochNotIntegrableError):
        ladder_stats_exact_skipfree(downhill, p, 0.0)


def test_finite_chain_forced_transition():
    chain = FiniteChainSpec(states=[0, 1], kernel=[[0.0, 1.0], [0.0, 1.0]])
    p = ProblemSpec(
        process=chain, payoff=PayoffSpec(kind="linear", params={}), cost=const_cost(0.3)
    )
    stats = ladder_stats_finite_chain(chain, p, 0.0)
    assert stats.e_tau_plus == pytest.approx(1.0)
    assert stats.phi == pytest.approx(1.0 - 0.3)


def test_finite_chain_holding_time():
    chain = FiniteChainSpec(
        states=[0, 1, 2],
        kernel=[[0.5, 0.25, 0.25], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
    )
    gamma = PayoffSpec(kind="exponential", params={"rate": 1.0})
    p = ProblemSpec(process=chain, payoff=gamma, cost=const_cost(0.0))
    stats = ladder_stats_finite_chain(chain, p, 0.0)
    assert stats.e_tau_plus == pytest.approx(2.0)
    assert stats.phi == pytest.approx(0.5 * np.e + 0.5 * np.e**2)

    with pytest.raises(LadderEpochNotIntegrableError):
        ladder_stats_finite_chain(chain, p, 2.0)
    with pytest.raises(MethodInapplicableError):
        ladder_stats_finite_chain(chain, p, 0.5)


def test_mc_agrees_with_closed_form(skipfree_problem, mc):
    exact = ladder_stats(skipfree_problem, 2.0, mc)
    est = ladder_stats_mc(skipfree_problem, 2.0, mc)
    assert est.method == "monte_carlo"
    assert est.paths == mc.paths
    # 99% CIs widened to about 4 standard errors
    assert abs(est.e_tau_plus - exact.e_tau_plus) <= 1.6 * est.ci_e_tau_plus
    assert abs(est.phi - exact.phi) <= 1.6 * est.ci_phi
    assert est.e_exit_payoff == pytest.approx(3.0)


def test_mc_is_reproducible_and_thread_independent(skipfree_problem):
    one = ladder_stats_mc(skipfree_problem, 0.0, MCConfig(paths=9000, seed=5, block_size=1000))
    many = ladder_stats_mc(
        skipfree_problem, 0.0, MCConfig(paths=9000, seed=5, block_size=1000, threads=4)
    )
    assert one.e_tau_plus == many.e_tau_plus
    assert one.phi == many.phi


def test_heavy_censoring_fails(skipfree_problem):
    with pytest.raises(EstimationFailedError):
        ladder_stats_mc(skipfree_problem, 0.0, MCConfig(paths=1000, seed=1, max_steps=1))


def test_pooled_sample_is_shared_across_starts():
    walk = StepDistribution(kind="gaussian", params={"m": 0.5, "s": 1.0})
    p = ProblemSpec(process=walk, payoff=cap(5), cost=const_cost(0.1))
    cfg = MCConfig(paths=5000, seed=11)
    store = ExcursionStore()
    pool = pooled_excursions(walk, cfg, store)
    again = pooled_excursions(walk, cfg, store)
    assert again is pool
    assert len(store) == 1

    low = ladder_stats_pooled(p, pool, -3.0, cfg)
    high = ladder_stats_pooled(p, pool, 3.0, cfg)
    assert low.e_tau_plus == high.e_tau_plus
    assert np.all(pool.ladder_heights > 0)
    # far above the cap every exit pays 5
    assert ladder_stats_pooled(p, pool, 10.0, cfg).e_exit_payoff == pytest.approx(5.0)


def test_hat_of_constant_cost_is_the_constant(bm):
    grid = np.linspace(-2.0, 2.0, 9)
    hat = hat_transform(bm, const_cost(0.5), grid, MCConfig())
    np.testing.assert_allclose(hat.values, 0.5)
    assert hat.method == "analytic_bm"

    jumps = JumpLaw(kind="normal", params={"mean": 0.2, "std": 0.3})
    cpp = LevySpec(kind="cpp_drift", params={"drift": 0.5, "rate": 1.0}, jumps=jumps)
    hat = hat_transform(cpp, const_cost(0.5), grid, MCConfig())
    np.testing.assert_allclose(hat.values, 0.5)


def test_hat_quadrature_of_flat_table(bm):
    grid = np.array([-1.0, 0.0, 2.0])
    hat = hat_transform(bm, flat_table_cost(0.5), grid, MCConfig())
    np.testing.assert_allclose(hat.values, 0.5, atol=1e-6)


def test_hat_of_increasing_cost_is_below_cost(bm):
    h = CostSpec(kind="affine_positive", params={"a": 1.0, "b": 0.5})
    grid = np.array([0.0, 1.0])
    hat = hat_transform(bm, h, grid, MCConfig())
    # theta = 2: 1 + 0.5 * (y - 1/2) plus the part clipped where h hits 0
    assert hat.values[1] == pytest.approx(1.25 + 0.25 * np.exp(-6.0), abs=1e-6)
    assert np.all(hat.values < 1.0 + 0.5 * grid)


def test_skeleton_hat_matches_brownian_closed_form(bm):
    h = CostSpec(kind="affine_positive", params={"a": 0.5, "b": 0.2})
    grid = np.array([0.0, 1.0, 2.0])
    values, halves = _skeleton_hat(bm, h, grid, MCConfig(paths=4000, seed=21), 2.0**-8)
    exact = np.array([bm_hat(1.0, 1.0, y, h) for y in grid])
    # the skeleton misses part of each minimum, about 0.58 sqrt(dt) in level
    assert np.all(np.abs(values - exact) <= halves + 0.02)
    assert np.all(np.diff(values) > 0)


def test_skeleton_hat_for_jump_process():
    jumps = JumpLaw(kind="normal", params={"mean": 0.2, "std": 0.3})
    cpp = LevySpec(kind="cpp_drift", params={"drift": 0.5, "rate": 1.0}, jumps=jumps)
    h = CostSpec(kind="affine_positive", params={"a": 1.0, "b": 0.5})
    cfg = MCConfig(paths=1000, seed=4, skeleton_dt=2.0**-6)
    hat = hat_transform(cpp, h, np.array([0.0, 2.0]), cfg)
    assert hat.method == "mc_skeleton"
    assert hat.refinements >= 1
    assert hat.values[1] > hat.values[0]
    assert np.all(hat.values < 1.0 + 0.5 * hat.grid)
    assert hat.calibration_constant is not None and hat.calibration_constant > 0
    assert hat.calibration_sensitivity is not None
    assert hat.passage_additivity is not None


def test_ladder_clock_calibration_for_brownian_motion(bm):
    calibration = passage_calibration(bm, MCConfig(paths=2000, seed=8), 2.0**-8)
    assert calibration.constant > 0
    # record counts and passage times both grow linearly in the height
    assert calibration.sensitivity < 0.1
    assert calibration.additivity < 0.1


def test_deterministic_walk_has_unit_ladder_epoch(skipfree_problem):
    up = StepDistribution(kind="two_point", params={"p": 1.0})
    p = skipfree_problem.model_copy(update={"process": up})
    stats = ladder_stats_mc(p, 0.0, MCConfig(paths=1000, seed=3))
    assert stats.e_tau_plus == 1.0
    assert stats.ci_e_tau_plus == pytest.approx(0.0, abs=1e-12)
    assert stats.phi == pytest.approx(1.0 - 0.1)


def test_gaussian_ladder_epoch_matches_spitzer():
    walk = StepDistribution(kind="gaussian", params={"m": 0.5, "s": 1.0})
    p = ProblemSpec(process=walk, payoff=cap(5), cost=const_cost(0.1))
    n = np.arange(1, 2001)
    # E tau+ = exp(sum_n P(S_n <= 0) / n)
    exact = float(np.exp(np.sum(norm.cdf(-0.5 * np.sqrt(n)) / n)))
    first = ladder_stats_mc(p, 0.0, MCConfig(paths=20_000, seed=1))
    second = ladder_stats_mc(p, 0.0, MCConfig(paths=20_000, seed=2))
    assert first.e_tau_plus != second.e_tau_plus
    for est in (first, second):
        assert abs(est.e_tau_plus - exact) <= 1.6 * est.ci_e_tau_plus
    assert abs(first.phi - second.phi) <= 1.6 * np.hypot(first.ci_phi, second.ci_phi)


def _tiny_pool() -> PooledExcursions:
    return PooledExcursions(
        partial_sums=np.array([1.0]),
        starts=np.array([0]),
        lengths=np.array([1]),
        simulated=1,
        censored=0,
    )


def test_store_evicts_least_recently_used():
    walk = StepDistribution(kind="gaussian", params={"m": 0.5, "s": 1.0})
    store = ExcursionStore(max_entries=2)
    configs = [MCConfig(paths=1000, seed=s) for s in range(3)]
    store.get_or_simulate(walk, configs[0], _tiny_pool)
    store.get_or_simulate(walk, configs[1], _tiny_pool)
    assert store.get(walk, configs[0]) is not None
    store.get_or_simulate(walk, configs[2], _tiny_pool)
    assert len(store) == 2
    assert store.get(walk, configs[1]) is None
    assert store.get(walk, configs[0]) is not None

    with pytest.raises(ValueError):
        ExcursionStore(max_entries=0)


@pytest.mark.slow
def test_mc_intervals_cover_closed_form(skipfree_problem):
    exact = ladder_stats(skipfree_problem, 0.0, MCConfig())
    covered_tau = covered_phi = 0
    for seed in range(100):
        est = ladder_stats_mc(skipfree_problem, 0.0, MCConfig(paths=2000, seed=seed))
        covered_tau += abs(est.e_tau_plus - exact.e_tau_plus) <= est.ci_e_tau_plus
        covered_phi += abs(est.phi - exact.phi) <= est.ci_phi
    assert covered_tau >= 95
    assert covered_phi >= 95
