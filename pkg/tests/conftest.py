from pathlib import Path

import pytest

from stopping_thresholds.settings import (
    CostSpec,
    LevySpec,
    MCConfig,
    PayoffSpec,
    ProblemSpec,
    StepDistribution,
)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def cap(k: float, **kw) -> PayoffSpec:
    return PayoffSpec(kind="piecewise_linear_cap", params={"K": k}, **kw)


def const_cost(c: float) -> CostSpec:
    return CostSpec(kind="constant", params={"c": c})


@pytest.fixture(scope="session")
def skipfree_walk() -> StepDistribution:
    return StepDistribution(kind="two_point", params={"p": 0.75, "u": 1, "d": 1})


@pytest.fixture(scope="session")
def skipfree_problem(skipfree_walk) -> ProblemSpec:
    # x_bar = 4.8, V(0) = 4
    return ProblemSpec(process=skipfree_walk, payoff=cap(5), cost=const_cost(0.1))


@pytest.fixture(scope="session")
def bm() -> LevySpec:
    return LevySpec(kind="bm_drift", params={"mu": 1.0, "sigma": 1.0})


@pytest.fixture(scope="session")
def bm_problem(bm) -> ProblemSpec:
    # x_bar = 0 where mu * gamma'(x) = c
    return ProblemSpec(
        process=bm,
        payoff=PayoffSpec(kind="softplus_concave", params={"a": 0.0, "s": 1.0}),
        cost=const_cost(0.5),
    )


@pytest.fixture
def mc() -> MCConfig:
    return MCConfig(paths=20_000, seed=20240611)


@pytest.fixture
def small_mc() -> MCConfig:
    return MCConfig(paths=2_000, seed=7)
