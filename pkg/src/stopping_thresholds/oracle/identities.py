import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from stopping_thresholds.errors import EstimationFailedError, InapplicableError
from stopping_thresholds.estimators import Moments
from stopping_thresholds.ladder import CENSOR_FAIL
from stopping_thresholds.model import (
    constant_cost,
    eval_payoff,
    levy_mean,
    levy_skeleton_passage,
)
from stopping_thresholds.settings import LevySpec, MCConfig, ProblemSpec
from stopping_thresholds.streams import run_blocks
from stopping_thresholds.threshold import evaluate_f_levy, value_of_threshold

logger = logging.getLogger(__name__)

Z_PASS = 3.0
IG_LEVELS = 256
SKELETON_F_POINTS = 65


@dataclass(frozen=True)
class IdentityReport:
    lhs: float
    rhs: float
    residual: float
    stderr: float
    z: float
    passed: bool
    paths: int = 0
    method: str = ""
    censored_fraction: float = 0.0


def _z(residual: float, stderr: float) -> float:
    if stderr > 0:
        return residual / stderr
    return 0.0 if abs(residual) < 1e-12 else float(np.copysign(np.inf, residual))


def _ig_block(
    levy: LevySpec,
    p: ProblemSpec,
    x: float,
    y_bar: float,
    f_mid: np.ndarray,
    c: float,
    rng: np.random.Generator,
    n: int,
) -> tuple[Moments, int]:
    """
    Passage times of Brownian motion level by level: the time to climb from
    one level to the next is inverse Gaussian, and the running maximum stays
    inside that level band meanwhile.
    """
    mu, sigma = levy.params["mu"], levy.params["sigma"]
    step = (y_bar - x) / f_mid.size
    pieces = rng.wald(step / mu, step * step / (sigma * sigma), (n, f_mid.size))
    total = pieces.sum(axis=1)
    rhs = -(pieces @ f_mid) + float(eval_payoff(p.payoff, y_bar)) - c * total
    return Moments.from_samples(rhs[:, None]), 0


def _skeleton_block(
    levy: LevySpec,
    p: ProblemSpec,
    x: float,
    y_bar: float,
    f_of_max: Callable[[np.ndarray], np.ndarray],
    cfg: MCConfig,
    rng: np.random.Generator,
    n: int,
) -> tuple[Moments, int]:
    sample = levy_skeleton_passage(
        levy,
        x,
        y_bar,
        cfg.skeleton_dt,
        cfg.max_steps,
        rng,
        n,
        cost=p.cost,
        max_integrand=f_of_max,
    )
    ok = ~sample.censored
    rhs = (
        -sample.max_integral[ok]
        + eval_payoff(p.payoff, sample.exit_position[ok])
        - sample.cost_integral[ok]
    )
    return Moments.from_samples(rhs[:, None]), int(sample.censored.sum())


def check_max_representation(
    levy: LevySpec,
    p: ProblemSpec,
    x: float,
    y_bar: float,
    cfg: MCConfig,
    f: Callable[[float], float] | None = None,
) -> IdentityReport:
    """
    gamma(x) against -E int f(running max) dt + E[gamma(X_T) - int h dt], T the
    first passage above y_bar. `f` defaults to evaluate_f_levy.
    """
    if x > y_bar:
        raise ValueError(f"need x <= y_bar, got x={x}, y_bar={y_bar}")
    if levy_mean(levy) <= 0:
        raise InapplicableError("first passage upward needs a positive mean")
    if f is None:
        def f(y: float) -> float:
            return evaluate_f_levy(levy, p, y, cfg)[0]

    lhs = float(eval_payoff(p.payoff, x))
    c = constant_cost(p.cost)
    if levy.kind == "bm_drift" and c is not None:
        method = "inverse_gaussian_levels"
        edges = np.linspace(x, y_bar, IG_LEVELS + 1)
        f_mid = np.array([f(y) for y in 0.5 * (edges[:-1] + edges[1:])])

        def simulate(rng, n):
            return _ig_block(levy, p, x, y_bar, f_mid, c, rng, n)

    else:
        method = "skeleton"
        grid = np.linspace(x, y_bar, SKELETON_F_POINTS)
        f_grid = np.array([f(y) for y in grid])

        def f_of_max(m: np.ndarray) -> np.ndarray:
            return np.interp(m, grid, f_grid)

        def simulate(rng, n):
            return _skeleton_block(levy, p, x, y_bar, f_of_max, cfg, rng, n)

    parts = run_blocks(simulate, cfg.paths, cfg, "max-representation", x, y_bar)
    censored = sum(k for _, k in parts)
    frac = censored / cfg.paths
    if frac > CENSOR_FAIL:
        raise EstimationFailedError(f"{frac:.1%} of passages above {y_bar:g} censored")
    mom = Moments.merge_all([m for m, _ in parts])
    rhs = float(mom.mean[0])
    stderr = float(mom.stderr[0])
    residual = rhs - lhs
    z = _z(residual, stderr)
    logger.info("Maximum representation residual %.4g (z=%.2f)", residual, z)
    return IdentityReport(
        lhs=lhs,
        rhs=rhs,
        residual=residual,
        stderr=stderr,
        z=z,
        passed=abs(z) <= Z_PASS,
        paths=mom.n,
        method=method,
        censored_fraction=frac,
    )


def check_ladder_sum_identity(
    p: ProblemSpec,
    x: float,
    y: float,
    cfg: MCConfig,
    convention: str = "strict",
) -> IdentityReport:
    """
    E_x[gamma(Y_T) - sum h] against gamma(x) plus the ladder-epoch gains, T the
    first time Y > y. The strict convention sums epochs before T; nonstrict
    also counts the epoch at T.
    """
    if x > y:
        raise ValueError(f"need x <= y, got x={x}, y={y}")
    if convention not in ("strict", "nonstrict"):
        raise ValueError(f"unknown convention '{convention}'")
    value = value_of_threshold(
        p, y, "strict", x, cfg, track_extra=convention == "nonstrict"
    )
    rhs = value.ladder_sum
    residual, stderr = -value.residual, value.residual_stderr
    if convention == "nonstrict":
        rhs += value.nonstrict_extra
        # paired residual plus the extra term; the extra term has its own spread
        residual += value.nonstrict_extra
        stderr = float(np.hypot(stderr, value.nonstrict_extra_stderr))
    z = _z(residual, stderr)
    return IdentityReport(
        lhs=value.value,
        rhs=rhs,
        residual=residual,
        stderr=stderr,
        z=z,
        passed=abs(z) <= Z_PASS,
        paths=value.paths,
        method=convention,
        censored_fraction=value.censored_fraction,
    )
