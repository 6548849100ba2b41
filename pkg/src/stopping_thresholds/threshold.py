import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from stopping_thresholds.errors import (
    AssumptionViolatedError,
    BracketNotFoundError,
    EstimationFailedError,
    IllConditionedRatioError,
    InapplicableError,
    LadderEpochNotIntegrableError,
    MethodInapplicableError,
    RootInconclusiveError,
)
from stopping_thresholds.estimators import Moments, z_value
from stopping_thresholds.ladder import (
    CENSOR_FAIL,
    CENSOR_WARN,
    LadderStats,
    hat_transform,
    ladder_stats,
    ladder_stats_exact_skipfree,
    ladder_stats_finite_chain,
    ladder_stats_pooled,
    pooled_excursions,
)
from stopping_thresholds.model import (
    constant_cost,
    eval_cost,
    eval_payoff,
    eval_payoff_derivative,
    is_skip_free,
    levy_mean,
    levy_skeleton_passage,
    make_stepper,
    step_std,
)
from stopping_thresholds.sample_store import ExcursionStore
from stopping_thresholds.settings import (
    FiniteChainSpec,
    LevySpec,
    MCConfig,
    ProblemSpec,
    StepDistribution,
)
from stopping_thresholds.streams import run_blocks

logger = logging.getLogger(__name__)

Evaluator = Callable[[float, int], tuple[float, float]]


@dataclass(frozen=True)
class FCurve:
    grid: np.ndarray
    f_values: np.ndarray
    ci_halfwidths: np.ndarray
    variant: str
    method: str = ""


@dataclass(frozen=True)
class Assumption2Report:
    status: str
    offending: list[tuple[int, int]] = field(default_factory=list)
    sign_change: tuple[float, float] | None = None


@dataclass(frozen=True)
class Threshold:
    x_bar: float
    boundary: str
    f_at_root: float
    ci: tuple[float, float]
    bracket: tuple[float, float]
    assumption2: Assumption2Report | None = None
    boundary_inconclusive: bool = False
    converged: bool = True
    method: str = ""
    paths: int = 0

    def stops(self, y) -> np.ndarray:
        """Membership of y in the stopping region of this rule."""
        y = np.asarray(y, dtype=float)
        if self.boundary == "nonstrict":
            return y >= self.x_bar
        return y > self.x_bar


@dataclass(frozen=True)
class ThresholdValue:
    value: float
    ci: float
    stderr: float
    ladder_sum: float
    ladder_ci: float
    residual: float
    residual_stderr: float
    z: float
    nonstrict_extra: float = 0.0
    nonstrict_extra_stderr: float = 0.0
    paths: int = 0
    censored_fraction: float = 0.0


# --- f ---------------------------------------------------------------------------------


def f_from_stats(stats: LadderStats, p: ProblemSpec, cfg: MCConfig) -> tuple[float, float]:
    """(phi - gamma) over E(tau+), or over E(sum g) when a weight is set."""
    gamma_y = float(eval_payoff(p.payoff, stats.y))
    weighted = p.weight is not None
    if stats.exact:
        den = stats.e_weight if weighted else stats.e_tau_plus
        if den <= 0:
            raise IllConditionedRatioError(f"denominator {den:g} <= 0 at y={stats.y:g}")
        return (stats.phi - gamma_y) / den, 0.0

    den_weights = [0.0, 0.0, 1.0, 0.0] if weighted else [1.0, 0.0, 0.0, 0.0]
    r, se, den, den_se = stats.moments.ratio(
        [0.0, -1.0, 0.0, 1.0], den_weights, num_offset=-gamma_y
    )
    z = z_value(cfg.ci_level)
    if den <= 0 or den - z * den_se <= 0:
        raise IllConditionedRatioError(
            f"denominator {den:g} +- {z * den_se:g} is not bounded away from 0"
        )
    return r, z * se


def evaluate_f(
    p: ProblemSpec, y: float, cfg: MCConfig, stream_key: tuple = ()
) -> tuple[float, float]:
    if isinstance(p.process, LevySpec):
        raise MethodInapplicableError("use evaluate_f_levy for Levy processes")
    return f_from_stats(ladder_stats(p, y, cfg, stream_key), p, cfg)


def _passage_block(
    levy: LevySpec, p: ProblemSpec, x: float, level: float, cfg: MCConfig, rng, n
) -> tuple[Moments, int]:
    sample = levy_skeleton_passage(
        levy, x, level, cfg.skeleton_dt, cfg.max_steps, rng, n, cost=p.cost
    )
    ok = ~sample.censored
    columns = np.column_stack(
        [
            sample.time[ok],
            sample.cost_integral[ok],
            eval_payoff(p.payoff, sample.exit_position[ok]),
        ]
    )
    return Moments.from_samples(columns), int(sample.censored.sum())


def _difference_quotient(
    levy: LevySpec, p: ProblemSpec, x: float, delta: float, cfg: MCConfig
) -> tuple[float, float]:
    """[E gamma(X_T) - gamma(x) - E cost] / E T, T the passage above x + delta."""
    parts = run_blocks(
        lambda rng, n: _passage_block(levy, p, x, x + delta, cfg, rng, n),
        cfg.paths,
        cfg,
        "difference-quotient",
        x,
        delta,
    )
    censored = sum(c for _, c in parts)
    if censored / cfg.paths > CENSOR_FAIL:
        raise EstimationFailedError(
            f"{censored / cfg.paths:.1%} of first passages above {x + delta:g} censored"
        )
    mom = Moments.merge_all([m for m, _ in parts])
    gamma_x = float(eval_payoff(p.payoff, x))
    r, se, _, _ = mom.ratio([0.0, -1.0, 1.0], [1.0, 0.0, 0.0], num_offset=-gamma_x)
    return r, se


def evaluate_f_levy(
    levy: LevySpec,
    p: ProblemSpec,
    x: float,
    cfg: MCConfig,
    backend: str = "auto",
) -> tuple[float, float]:
    """
    f = A_H gamma - h-hat for a Levy process with positive mean.

    The analytic backend (Brownian motion) uses A_H gamma = mu gamma'. The
    difference backend simulates first passages over delta and delta / 2 and
    combines them by Richardson extrapolation.
    """
    mean = levy_mean(levy)
    if mean <= 0:
        raise InapplicableError(f"E(X_1) = {mean:g} is not positive")
    if backend == "auto":
        backend = "analytic" if levy.kind == "bm_drift" else "difference"

    if backend == "analytic":
        if levy.kind != "bm_drift":
            raise MethodInapplicableError("analytic f needs Brownian motion with drift")
        h_hat = hat_transform(levy, p.cost, [x], cfg).values[0]
        mu = levy.params["mu"]
        return mu * float(eval_payoff_derivative(p.payoff, x)) - float(h_hat), 0.0

    delta = cfg.levy_delta
    coarse, coarse_se = _difference_quotient(levy, p, x, delta, cfg)
    fine, fine_se = _difference_quotient(levy, p, x, delta / 2, cfg)
    z = z_value(cfg.ci_level)
    return 2.0 * fine - coarse, z * float(np.hypot(2.0 * fine_se, coarse_se))


def _map_grid(fn: Callable[[int, float], tuple[float, float]], grid, threads: int):
    if threads <= 1:
        return [fn(i, y) for i, y in enumerate(grid)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, i, y) for i, y in enumerate(grid)]
        return [fut.result() for fut in futures]


def evaluate_f_curve(
    p: ProblemSpec,
    grid,
    cfg: MCConfig,
    pooled: bool = False,
    levy_backend: str = "auto",
    store: ExcursionStore | None = None,
) -> FCurve:
    """f on a grid, one substream per grid index, grid points run concurrently."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    inner = cfg.model_copy(update={"threads": 1})
    proc = p.process

    if isinstance(proc, LevySpec):
        variant = "levy"
        analytic = proc.kind == "bm_drift" and levy_backend != "difference"
        method = "analytic_bm" if analytic else "difference_quotient"

        def point(i: int, y: float) -> tuple[float, float]:
            return evaluate_f_levy(proc, p, y, inner, backend=levy_backend)

    elif pooled and isinstance(proc, StepDistribution) and not is_skip_free(proc):
        variant = "weighted" if p.weight is not None else "standard"
        method = "monte_carlo_pooled"
        pool = pooled_excursions(proc, cfg, store)

        def point(i: int, y: float) -> tuple[float, float]:
            return f_from_stats(ladder_stats_pooled(p, pool, y, inner), p, inner)

    else:
        variant = "weighted" if p.weight is not None else "standard"
        if isinstance(proc, FiniteChainSpec):
            method = "exact_chain"
        elif is_skip_free(proc):
            method = "exact_skipfree"
        else:
            method = "monte_carlo"

        def point(i: int, y: float) -> tuple[float, float]:
            return evaluate_f(p, y, inner, stream_key=(i,))

    results = _map_grid(point, grid, cfg.threads)
    return FCurve(
        grid=grid,
        f_values=np.array([f for f, _ in results]),
        ci_halfwidths=np.array([ci for _, ci in results]),
        variant=variant,
        method=method,
    )


# --- Assumption 2 -----------------------------------------------------------------------


def robust_sign(f: float, ci: float) -> int:
    if f - ci > 0:
        return 1
    if f + ci < 0:
        return -1
    return 0


def validate_assumption2(curve: FCurve) -> Assumption2Report:
    """
    Exactly one CI-robust sign change, and f non-increasing from there on.

    A curve with no sign change that robustly increases somewhere is reported
    as violated; otherwise it raises BracketNotFoundError.
    """
    f = np.asarray(curve.f_values)
    ci = np.asarray(curve.ci_halfwidths)
    signs = np.array([robust_sign(a, b) for a, b in zip(f, ci)])
    slack = 1e-9 * np.maximum(1.0, np.abs(f))
    lower, upper = f - ci, f + ci + slack
    rises = [
        (i, i + 1) for i in range(f.size - 1) if lower[i + 1] > upper[i]
    ]

    pos = np.flatnonzero(signs > 0)
    neg = np.flatnonzero(signs < 0)
    if pos.size == 0 and neg.size == 0:
        raise BracketNotFoundError("f has no CI-robust sign on the grid")
    if pos.size == 0 or neg.size == 0:
        if rises:
            return Assumption2Report("violated", rises, None)
        raise BracketNotFoundError("f does not change sign on the grid")

    last_pos, first_neg = int(pos[-1]), int(neg[0])
    if last_pos > first_neg:
        # f is back above 0 after going below it: a second sign change
        pairs = [(first_neg, int(j)) for j in pos if j > first_neg]
        return Assumption2Report("violated", pairs, None)

    change = (float(curve.grid[last_pos]), float(curve.grid[first_neg]))
    after = [(i, j) for i, j in rises if i >= last_pos]
    if after:
        return Assumption2Report("violated", after, change)
    # point rises larger than either CI are not certified either way
    soft = [
        (i, i + 1)
        for i in range(last_pos, f.size - 1)
        if f[i + 1] - f[i] > max(ci[i], ci[i + 1]) + slack[i]
    ]
    if soft:
        return Assumption2Report("inconclusive", soft, change)
    return Assumption2Report("certified", [], change)


# --- root finding ------------------------------------------------------------------------


@dataclass
class _Bisection:
    lo: float
    hi: float
    paths: int
    converged: bool = True


def _escalate(
    evaluate: Evaluator, y: float, paths: int, max_paths: int
) -> tuple[float, float, int, int]:
    """Quadruple paths at y while the CI of f(y) straddles 0."""
    f, ci = evaluate(y, paths)
    sign = robust_sign(f, ci)
    while sign == 0 and paths * 4 <= max_paths:
        paths *= 4
        logger.debug("f(%g) = %g +- %g straddles 0, paths -> %d", y, f, ci, paths)
        f, ci = evaluate(y, paths)
        sign = robust_sign(f, ci)
    return f, ci, sign, paths


def _check_bracket(
    evaluate: Evaluator, lo: float, hi: float, paths: int, max_paths: int, exact: bool
) -> int:
    f_lo, ci_lo, s_lo, paths = _escalate(evaluate, lo, paths, max_paths)
    if s_lo < 0:
        raise BracketNotFoundError(f"f({lo:g}) = {f_lo:g} < 0 at the lower end")
    if s_lo == 0:
        raise RootInconclusiveError(
            f"sign of f({lo:g}) = {f_lo:g} +- {ci_lo:g} is not resolved", (lo, hi)
        )
    f_hi, ci_hi, s_hi, paths = _escalate(evaluate, hi, paths, max_paths)
    if s_hi > 0:
        raise BracketNotFoundError(f"f({hi:g}) = {f_hi:g} > 0 at the upper end")
    if s_hi == 0 and not exact:
        raise RootInconclusiveError(
            f"sign of f({hi:g}) = {f_hi:g} +- {ci_hi:g} is not resolved", (lo, hi)
        )
    return paths


def _bisect(
    evaluate: Evaluator,
    bracket: tuple[float, float],
    tol: float,
    paths: int,
    max_paths: int,
    exact: bool,
) -> _Bisection:
    """Bisection for inf{y : f(y) <= 0}, keeping f(lo) > 0 >= f(hi)."""
    lo, hi = bracket
    paths = _check_bracket(evaluate, lo, hi, paths, max_paths, exact)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if exact:
            f, _ = evaluate(mid, paths)
            sign = 1 if f > 0 else -1
        else:
            f, ci, sign, paths = _escalate(evaluate, mid, paths, max_paths)
            if sign == 0:
                logger.info("Bisection stalled at %g with bracket (%g, %g)", mid, lo, hi)
                return _Bisection(lo, hi, paths, converged=False)
        logger.debug("f(%g) = %g, bracket (%g, %g)", mid, f, lo, hi)
        if sign > 0:
            lo = mid
        else:
            hi = mid
    return _Bisection(lo, hi, paths)


def _classify(
    evaluate: Evaluator, search: _Bisection, exact: bool, max_paths: int
) -> tuple[float, float, float, str, bool, int]:
    x_bar = 0.5 * (search.lo + search.hi)
    if exact:
        n = search.paths
        f_mid, _ = evaluate(x_bar, n)
        # |f(x_bar)| below the jump across the final bracket counts as f = 0
        variation = abs(evaluate(search.lo, n)[0] - evaluate(search.hi, n)[0])
        strict = abs(f_mid) > variation + 1e-12 and f_mid > 0
        boundary = "strict" if strict else "nonstrict"
        return x_bar, f_mid, 0.0, boundary, False, n
    f_mid, ci, sign, paths = _escalate(evaluate, x_bar, search.paths, max_paths)
    if sign > 0:
        return x_bar, f_mid, ci, "strict", False, paths
    return x_bar, f_mid, ci, "nonstrict", sign == 0, paths


def _assumption2_on(
    evaluate: Evaluator, bracket, points: int, paths: int
) -> Assumption2Report:
    grid = np.linspace(bracket[0], bracket[1], points)
    values = np.array([evaluate(y, paths) for y in grid])
    curve = FCurve(grid, values[:, 0], values[:, 1], "standard")
    try:
        return validate_assumption2(curve)
    except BracketNotFoundError:
        return Assumption2Report("inconclusive")


def _evaluator(p: ProblemSpec, cfg: MCConfig) -> tuple[Evaluator, bool, str]:
    """f as a function of (y, paths), whether it is exact, and the method name."""
    proc = p.process

    def sized(n: int) -> MCConfig:
        return cfg if n == cfg.paths else cfg.model_copy(update={"paths": n})

    if isinstance(proc, LevySpec):
        exact = proc.kind == "bm_drift"

        def levy_f(y: float, n: int) -> tuple[float, float]:
            return evaluate_f_levy(proc, p, y, sized(n))

        return levy_f, exact, "analytic_bm" if exact else "difference_quotient"

    def walk_f(y: float, n: int) -> tuple[float, float]:
        return evaluate_f(p, y, sized(n))

    if isinstance(proc, FiniteChainSpec):
        return walk_f, True, "exact_chain"
    if is_skip_free(proc):
        return walk_f, True, "exact_skipfree"
    return walk_f, False, "monte_carlo"


def chain_threshold(
    chain: FiniteChainSpec, p: ProblemSpec, bracket: tuple[float, float]
) -> Threshold:
    """
    First chain state in the bracket with f <= 0.

    f lives on the states only, so the rule is entry into [x_bar, inf) and the
    bracket is the single state x_bar. A state with nothing above it has f = -inf.
    """
    states = [y for y in chain.states if bracket[0] <= y <= bracket[1]]
    if len(states) < 2:
        raise BracketNotFoundError(f"fewer than two chain states in {bracket}")
    values = []
    for y in states:
        try:
            f, _ = f_from_stats(ladder_stats_finite_chain(chain, p, y), p, MCConfig())
        except LadderEpochNotIntegrableError:
            if y < chain.states[-1]:
                raise
            f = -np.inf
        values.append(f)
    if values[0] <= 0:
        raise BracketNotFoundError(f"f({states[0]:g}) = {values[0]:g} <= 0 at the lowest state")
    k = next((i for i, f in enumerate(values) if f <= 0), None)
    if k is None:
        raise BracketNotFoundError(f"f > 0 at every chain state up to {states[-1]:g}")
    x_bar = float(states[k])
    curve = FCurve(
        np.asarray(states, dtype=float),
        np.maximum(values, -1e300),
        np.zeros(len(states)),
        "weighted" if p.weight is not None else "standard",
        "exact_chain",
    )
    try:
        report = validate_assumption2(curve)
    except BracketNotFoundError:
        report = Assumption2Report("inconclusive")
    logger.info("Chain threshold x_bar=%g (first state with f <= 0)", x_bar)
    return Threshold(
        x_bar=x_bar,
        boundary="nonstrict",
        f_at_root=float(values[k]),
        ci=(float(values[k]), float(values[k])),
        bracket=(x_bar, x_bar),
        assumption2=report,
        method="exact_chain",
    )


def find_root(
    p: ProblemSpec,
    bracket: tuple[float, float],
    cfg: MCConfig,
    tol: float = 1e-6,
    grid_points: int = 9,
) -> Threshold:
    """
    CI-aware bisection for the root of f.

    A comparison is accepted only when the CI of f excludes 0; otherwise the
    paths at that point are quadrupled, up to bisection_budget times the base.
    Finite chains are scanned state by state instead.
    """
    lo, hi = bracket
    if not lo < hi:
        raise ValueError(f"bracket must satisfy lo < hi, got {bracket}")
    if isinstance(p.process, FiniteChainSpec):
        return chain_threshold(p.process, p, bracket)
    evaluate, exact, method = _evaluator(p, cfg)
    max_paths = cfg.paths * cfg.bisection_budget
    search = _bisect(evaluate, (lo, hi), tol, cfg.paths, max_paths, exact)
    if not search.converged:
        raise RootInconclusiveError(
            f"path budget exhausted with f straddling 0 on ({search.lo:g}, {search.hi:g})",
            (search.lo, search.hi),
        )
    x_bar, f_mid, ci, boundary, inconclusive, paths = _classify(
        evaluate, search, exact, max_paths
    )
    report = _assumption2_on(evaluate, (lo, hi), grid_points, cfg.paths)
    logger.info("Root x_bar=%.10g (%s entry), f=%.3g +- %.3g", x_bar, boundary, f_mid, ci)
    return Threshold(
        x_bar=x_bar,
        boundary=boundary,
        f_at_root=f_mid,
        ci=(f_mid - ci, f_mid + ci),
        bracket=(search.lo, search.hi),
        assumption2=report,
        boundary_inconclusive=inconclusive,
        method=method,
        paths=paths,
    )


def _check_random_walk_conditions(p: ProblemSpec, bracket) -> None:
    xs = np.linspace(bracket[0], bracket[1], 512)
    h = eval_cost(p.cost, xs)
    if np.any(h < 0):
        raise AssumptionViolatedError("h takes negative values on the bracket")
    if np.any(np.diff(h) < -1e-12):
        raise AssumptionViolatedError("h is not non-decreasing on the bracket")


def _check_concave_above(p: ProblemSpec, x_bar: float, hi: float) -> None:
    top = max(hi, x_bar + 1.0)
    xs = np.linspace(x_bar, top, 257)
    g = eval_payoff(p.payoff, xs)
    second = g[:-2] - 2.0 * g[1:-1] + g[2:]
    scale = max(1.0, float(np.max(np.abs(g))))
    bad = np.flatnonzero(second > 1e-9 * scale)
    if bad.size:
        raise AssumptionViolatedError(
            f"gamma is not concave on [{x_bar:g}, inf): convex near x={xs[bad[0] + 1]:g}"
        )


def random_walk_threshold(
    walk: StepDistribution,
    p: ProblemSpec,
    cfg: MCConfig,
    bracket: tuple[float, float] = (-20.0, 20.0),
    tol: float = 1e-9,
    store: ExcursionStore | None = None,
    grid_points: int = 17,
) -> Threshold:
    """
    x_bar = inf{y : f(y) <= 0} for a random walk.

    Skip-free walks use the exact ladder statistics. Other walks reuse one
    pooled sample of excursions for every y; a straddling CI enlarges the pool.
    Stopping at x_bar is entry into [x_bar, inf) when f(x_bar) <= 0 and into
    (x_bar, inf) otherwise.
    """
    _check_random_walk_conditions(p, bracket)
    if is_skip_free(walk):
        exact, method = True, "exact_skipfree"

        def evaluate(y: float, n: int) -> tuple[float, float]:
            return f_from_stats(ladder_stats_exact_skipfree(walk, p, y), p, cfg)

    else:
        exact, method = False, "monte_carlo_pooled"

        def evaluate(y: float, n: int) -> tuple[float, float]:
            sized = cfg.model_copy(update={"paths": n})
            pool = pooled_excursions(walk, sized, store)
            return f_from_stats(ladder_stats_pooled(p, pool, y, sized), p, sized)

    max_paths = cfg.paths * cfg.bisection_budget
    search = _bisect(evaluate, bracket, tol, cfg.paths, max_paths, exact)
    x_bar, f_mid, ci, boundary, inconclusive, paths = _classify(
        evaluate, search, exact, max_paths
    )
    if not search.converged:
        logger.warning(
            "Pooled bisection stopped at bracket (%g, %g) with %d paths",
            search.lo,
            search.hi,
            paths,
        )
    _check_concave_above(p, x_bar, bracket[1])
    report = _assumption2_on(evaluate, bracket, grid_points, paths)
    logger.info("Random-walk threshold x_bar=%.10g (%s entry)", x_bar, boundary)
    return Threshold(
        x_bar=x_bar,
        boundary=boundary,
        f_at_root=f_mid,
        ci=(f_mid - ci, f_mid + ci),
        bracket=(search.lo, search.hi),
        assumption2=report,
        boundary_inconclusive=inconclusive,
        converged=search.converged,
        method=method,
        paths=paths,
    )


# --- pricing threshold rules ---------------------------------------------------------------


def _ladder_gain(
    p: ProblemSpec,
    cfg: MCConfig,
    lo: float,
    hi: float,
    store: ExcursionStore | None,
) -> Callable[[np.ndarray], np.ndarray]:
    """psi(y) = phi(y) - gamma(y), the expected gain of one ladder epoch."""
    proc = p.process
    if isinstance(proc, FiniteChainSpec) or is_skip_free(proc):
        cache: dict[float, float] = {}

        def exact(y: float) -> float:
            if y not in cache:
                if isinstance(proc, FiniteChainSpec):
                    stats = ladder_stats_finite_chain(proc, p, y)
                else:
                    stats = ladder_stats_exact_skipfree(proc, p, y)
                cache[y] = stats.phi - float(eval_payoff(p.payoff, y))
            return cache[y]

        def psi(ys: np.ndarray) -> np.ndarray:
            ys = np.asarray(ys, dtype=float)
            uniq, inv = np.unique(ys, return_inverse=True)
            return np.array([exact(float(u)) for u in uniq])[inv].reshape(ys.shape)

        return psi

    pool = pooled_excursions(proc, cfg, store)
    grid = np.linspace(lo, hi, 512)
    gains = np.array(
        [
            ladder_stats_pooled(p, pool, y, cfg).phi - float(eval_payoff(p.payoff, y))
            for y in grid
        ]
    )
    return lambda ys: np.interp(ys, grid, gains)


def _threshold_block(
    p: ProblemSpec,
    y_start: float,
    stops: Callable[[np.ndarray], np.ndarray],
    psi: Callable[[np.ndarray], np.ndarray],
    track_extra: bool,
    max_steps: int,
    rng: np.random.Generator,
    n: int,
) -> tuple[Moments, int]:
    init, step, position = make_stepper(p.process, y_start)
    state = init(n)
    paid = np.zeros(n)
    direct = np.zeros(n)
    extra = np.zeros(n)
    start_gain = float(psi(np.array([y_start]))[0])
    ladder = np.full(n, float(eval_payoff(p.payoff, y_start)) + start_gain)
    run_max = np.full(n, float(y_start))
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        state[active] = step(state[active], rng)
        pos = position(state[active])
        paid[active] += eval_cost(p.cost, pos)
        stop = stops(pos)
        new_max = pos > run_max[active]
        epoch = new_max & ~stop
        if epoch.any():
            idx = active[epoch]
            ladder[idx] += psi(pos[epoch])
            run_max[idx] = pos[epoch]
        if stop.any():
            idx = active[stop]
            direct[idx] = eval_payoff(p.payoff, pos[stop]) - paid[idx]
            if track_extra:
                at_max = new_max[stop]
                extra[idx[at_max]] = psi(pos[stop][at_max])
        active = active[~stop]
    finished = np.ones(n, dtype=bool)
    finished[active] = False
    samples = np.column_stack([direct, ladder, extra])[finished]
    return Moments.from_samples(samples), int(active.size)


def value_of_threshold(
    p: ProblemSpec,
    x_stop: float,
    boundary: str,
    y_start: float,
    cfg: MCConfig,
    track_extra: bool = False,
    store: ExcursionStore | None = None,
) -> ThresholdValue:
    """
    Value of the threshold rule from y_start, by direct simulation and by the
    ladder sum gamma(y_start) + sum of psi over ladder epochs strictly before
    the stopping time. Both use the same paths, so their difference is a
    paired residual. The stream depends only on y_start, so rules with
    different thresholds are compared on common random numbers.
    """
    if isinstance(p.process, LevySpec):
        raise MethodInapplicableError("use value_of_levy_threshold for Levy processes")
    if boundary not in ("strict", "nonstrict"):
        raise ValueError(f"unknown boundary '{boundary}'")

    def stops(pos) -> np.ndarray:
        pos = np.asarray(pos)
        return pos >= x_stop if boundary == "nonstrict" else pos > x_stop

    gamma_start = float(eval_payoff(p.payoff, y_start))
    if stops(y_start):
        return ThresholdValue(gamma_start, 0.0, 0.0, gamma_start, 0.0, 0.0, 0.0, 0.0)

    hi = x_stop
    if isinstance(p.process, StepDistribution):
        hi = x_stop + 4.0 * step_std(p.process)
    psi = _ladder_gain(p, cfg, y_start, max(hi, y_start + 1e-9), store)
    parts = run_blocks(
        lambda rng, n: _threshold_block(
            p, y_start, stops, psi, track_extra, cfg.max_steps, rng, n
        ),
        cfg.paths,
        cfg,
        "value",
        y_start,
    )
    censored = sum(c for _, c in parts)
    frac = censored / cfg.paths
    if frac > CENSOR_FAIL:
        raise EstimationFailedError(
            f"{frac:.1%} of paths from {y_start:g} never reached the stopping region"
        )
    if frac > CENSOR_WARN:
        logger.warning("Threshold value from %g: %.2f%% of paths censored", y_start, 100 * frac)

    mom = Moments.merge_all([m for m, _ in parts])
    z = z_value(cfg.ci_level)
    se = mom.stderr
    residual, res_se = mom.linear([1.0, -1.0, 0.0])
    z_score = residual / res_se if res_se > 0 else (0.0 if abs(residual) < 1e-12 else np.inf)
    return ThresholdValue(
        value=float(mom.mean[0]),
        ci=float(z * se[0]),
        stderr=float(se[0]),
        ladder_sum=float(mom.mean[1]),
        ladder_ci=float(z * se[1]),
        residual=residual,
        residual_stderr=res_se,
        z=float(z_score),
        nonstrict_extra=float(mom.mean[2]),
        nonstrict_extra_stderr=float(se[2]),
        paths=mom.n,
        censored_fraction=frac,
    )


def _levy_value_block(
    levy: LevySpec, p: ProblemSpec, x_bar: float, x: float, cfg: MCConfig, rng, n
) -> tuple[Moments, int]:
    c = constant_cost(p.cost)
    if levy.kind == "bm_drift" and c is not None:
        mu, sigma = levy.params["mu"], levy.params["sigma"]
        gap = x_bar - x
        times = rng.wald(gap / mu, gap * gap / (sigma * sigma), n)
        values = float(eval_payoff(p.payoff, x_bar)) - c * times
        return Moments.from_samples(values[:, None]), 0
    sample = levy_skeleton_passage(
        levy, x, x_bar, cfg.skeleton_dt, cfg.max_steps, rng, n, cost=p.cost
    )
    ok = ~sample.censored
    values = eval_payoff(p.payoff, sample.exit_position[ok]) - sample.cost_integral[ok]
    return Moments.from_samples(values[:, None]), int(sample.censored.sum())


def value_of_levy_threshold(
    levy: LevySpec, p: ProblemSpec, x_bar: float, x: float, cfg: MCConfig
) -> tuple[float, float]:
    """Value from x of stopping at the first passage of the process above x_bar."""
    if x >= x_bar:
        return float(eval_payoff(p.payoff, x)), 0.0
    if levy_mean(levy) <= 0:
        raise InapplicableError("first passage upward needs a positive mean")
    parts = run_blocks(
        lambda rng, n: _levy_value_block(levy, p, x_bar, x, cfg, rng, n),
        cfg.paths,
        cfg,
        "levy-value",
        x,
        x_bar,
    )
    censored = sum(c for _, c in parts)
    if censored / cfg.paths > CENSOR_FAIL:
        raise EstimationFailedError(f"{censored / cfg.paths:.1%} of passages censored")
    mom = Moments.merge_all([m for m, _ in parts])
    return float(mom.mean[0]), float(z_value(cfg.ci_level) * mom.stderr[0])
