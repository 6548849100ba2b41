import math

import numpy as np
import pytest
from conftest import const_cost

from stopping_thresholds.discretize import (
    build_spatial_discretization,
    build_time_discretization,
    check_fn_convergence,
    solve_level,
    solve_sequence,
)
from stopping_thresholds.errors import InapplicableError
from stopping_thresholds.model import lattice_law
from stopping_thresholds.settings import (
    JumpLaw,
    LevySpec,
    MCConfig,
    PayoffSpec,
    ProblemSpec,
)

CONTINUUM_VALUE = -math.log(2.0) - 0.5


def test_time_grid_level_two(bm, bm_problem, mc):
    walk = build_time_discretization(bm, bm_problem, 2, mc)
    assert walk.step.kind == "gaussian"
    assert walk.step.params["m"] == pytest.approx(0.25)
    assert walk.step.params["s"] == pytest.approx(0.5)
    assert walk.ceil_h.params["c"] == pytest.approx(0.125)
    assert walk.weight is None

    free = bm_problem.model_copy(update={"cost": const_cost(0.0)})
    assert build_time_discretization(bm, free, 2, mc).ceil_h.params["c"] == 0.0


def test_time_grid_needs_bounded_payoff(bm, bm_problem, mc):
    wild = bm_problem.model_copy(
        update={"payoff": PayoffSpec(kind="exponential", params={"rate": 1.0})}
    )
    with pytest.raises(InapplicableError):
        build_time_discretization(bm, wild, 1, mc)


def test_spatial_grid_level_one(bm, bm_problem, mc):
    walk = build_spatial_discretization(bm, bm_problem, 1, (-20.0, 20.0), mc)
    assert walk.delta == 0.5
    assert walk.p_up == pytest.approx(0.731059, abs=1e-6)
    assert walk.real_time_per_step == pytest.approx(0.231059, abs=1e-6)
    assert walk.ceil_h.params["c"] == pytest.approx(0.5 * 0.231059, abs=1e-6)
    assert walk.weight.params["c"] == pytest.approx(walk.real_time_per_step)
    law = lattice_law(walk.step)
    assert law.unit == pytest.approx(0.5)


@pytest.mark.parametrize("n, expected", [(1, -0.25), (2, -0.125)])
def test_spatial_threshold_sits_half_a_cell_below(bm, bm_problem, mc, n, expected):
    walk = build_spatial_discretization(bm, bm_problem, n, (-20.0, 20.0), mc)
    result = solve_level(walk, bm_problem, mc)
    assert result.threshold.x_bar == pytest.approx(expected, abs=1e-8)
    assert not result.immediate_stop


def test_expensive_time_grid_stops_at_once(bm, bm_problem):
    cfg = MCConfig(paths=2000, seed=3)
    pricey = bm_problem.model_copy(update={"cost": const_cost(100.0)})
    walk = build_time_discretization(bm, pricey, 2, cfg)
    result = solve_level(walk, pricey, cfg, probes=[-1.0, 0.0])
    assert result.immediate_stop
    assert result.threshold.x_bar == -math.inf
    assert result.values[0].value == pytest.approx(-math.log1p(math.e))
    assert result.values[1].value == pytest.approx(-math.log(2.0))


def test_spatial_sequence_converges(bm, bm_problem, mc):
    report = solve_sequence(bm, bm_problem, [1, 2, 3, 4], [-1.0], mc)
    np.testing.assert_allclose(report.thresholds, [-0.25, -0.125, -0.0625, -0.03125], atol=1e-8)
    assert report.monotone_thresholds_ok
    assert report.monotone_values_ok
    assert report.nested_grids_ok
    assert report.continuum_threshold == pytest.approx(0.0, abs=1e-6)
    assert report.limit_estimate == pytest.approx(0.0, abs=0.01)
    assert report.richardson_order == pytest.approx(1.0, abs=1e-6)
    for values, stderrs in zip(report.values, report.value_stderrs):
        assert abs(values[0] - CONTINUUM_VALUE) <= 4.0 * stderrs[0]
    assert report.f_residuals is not None
    assert len(report.f_residuals) == 4


def test_sequence_rejects_unordered_levels(bm, bm_problem, mc):
    with pytest.raises(ValueError):
        solve_sequence(bm, bm_problem, [2, 1], [-1.0], mc)


def test_fn_residuals_halve(bm, bm_problem, mc):
    conv = check_fn_convergence(bm, bm_problem, [2, 3, 4, 5], [-1.0, 0.0, 1.0], mc)
    assert conv.halving_ok
    for row in conv.halving_ratios:
        assert all(1.6 <= r <= 2.4 for r in row)
    assert all(order == pytest.approx(1.0, abs=0.2) for order in conv.orders)
    # gamma'(0) = 1/2 and mu = 1, h = 1/2
    assert conv.targets[1] == pytest.approx(0.0, abs=1e-12)


def test_fn_is_exact_for_linear_payoff(bm, mc):
    p = ProblemSpec(process=bm, payoff=PayoffSpec(kind="linear", params={}), cost=const_cost(0.0))
    conv = check_fn_convergence(bm, p, [1, 2, 3], [-1.0, 0.0, 1.0], mc)
    assert max(max(row) for row in conv.residuals) < 1e-9
    assert conv.halving_ok


def test_spatial_grid_for_jump_process():
    jumps = JumpLaw(kind="normal", params={"mean": -0.3, "std": 0.3})
    cpp = LevySpec(kind="cpp_drift", params={"drift": 1.0, "rate": 1.0}, jumps=jumps)
    p = ProblemSpec(
        process=cpp,
        payoff=PayoffSpec(kind="softplus_concave", params={"a": 0.0, "s": 1.0}),
        cost=const_cost(0.5),
    )
    cfg = MCConfig(paths=2000, seed=5, skeleton_dt=2.0**-8)
    walk = build_spatial_discretization(cpp, p, 1, (-20.0, 20.0), cfg)
    assert max(walk.step.support) == 1
    assert min(walk.step.support) <= -1
    assert sum(walk.step.probs) == pytest.approx(1.0)
    assert 0.0 < walk.p_up < 1.0
    assert walk.snap_bias >= 0.0
    assert walk.ceil_h.params["c"] == pytest.approx(0.5 * walk.real_time_per_step)
