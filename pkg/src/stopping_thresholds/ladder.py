import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from stopping_thresholds.errors import (
    EstimationFailedError,
    InapplicableError,
    LadderEpochNotIntegrableError,
    MethodInapplicableError,
)
from stopping_thresholds.estimators import Moments, z_value
from stopping_thresholds.model import (
    LatticeLaw,
    chain_state_index,
    constant_cost,
    eval_cost,
    eval_payoff,
    is_skip_free,
    lattice_law,
    levy_mean,
    levy_skeleton_passage,
    levy_variance,
    make_stepper,
    sample_levy_increments,
    sub_kernel_spectral_radius,
    weight_of,
)
from stopping_thresholds.oracle.brownian import bm_hat
from stopping_thresholds.sample_store import ExcursionStore, PooledExcursions
from stopping_thresholds.settings import (
    CostSpec,
    FiniteChainSpec,
    LevySpec,
    MCConfig,
    ProblemSpec,
    StepDistribution,
)
from stopping_thresholds.streams import run_blocks, substream

logger = logging.getLogger(__name__)

SKIPFREE_DEPTH = 64
CENSOR_WARN = 0.01
CENSOR_FAIL = 0.10
HAT_MAX_REFINEMENTS = 3
HAT_REL_CHANGE = 0.02
CALIBRATION_HEIGHT = 1.0
CALIBRATION_PATHS = 2000

# Column order of per-path ladder samples.
TAU, COST, WEIGHT, EXIT = range(4)

_default_store = ExcursionStore()


@dataclass(frozen=True)
class LadderStats:
    y: float
    e_tau_plus: float
    phi: float
    e_cost: float
    e_weight: float
    e_exit_payoff: float
    ci_e_tau_plus: float = 0.0
    ci_phi: float = 0.0
    ci_e_cost: float = 0.0
    ci_e_weight: float = 0.0
    method: str = "exact_skipfree"
    paths: int = 0
    censored_fraction: float = 0.0
    reliable: bool = True
    truncation_bound: float = 0.0
    moments: Moments | None = field(default=None, repr=False, compare=False)

    @property
    def exact(self) -> bool:
        return self.method != "monte_carlo"


@dataclass(frozen=True)
class HatFunction:
    grid: np.ndarray
    values: np.ndarray
    ci_halfwidths: np.ndarray
    method: str
    skeleton_dt: float | None = None
    refinements: int = 0
    converged: bool = True
    calibration_constant: float | None = None
    calibration_sensitivity: float | None = None
    passage_additivity: float | None = None


def _censoring_check(censored: int, total: int, what: str) -> tuple[float, bool]:
    frac = censored / total if total else 0.0
    if frac > CENSOR_FAIL:
        raise EstimationFailedError(
            f"{what}: {frac:.1%} of paths hit max_steps (limit {CENSOR_FAIL:.0%})"
        )
    if frac > CENSOR_WARN:
        logger.warning("%s: %.2f%% of paths censored, estimate unreliable", what, 100 * frac)
        return frac, False
    return frac, True


# --- exact: upward skip-free lattice walks ------------------------------------------


def _skipfree_system(
    law: LatticeLaw, y: float, values, depth: int
) -> tuple[np.ndarray, float]:
    """
    Expected sum of values(Y_i) up to the first visit of y + unit, started at
    y - j*unit for j = 0..depth, with reflection at the truncation depth.

    Also returns the expected number of truncated landings from y.
    """
    size = depth + 1
    j = np.arange(size)
    a = np.eye(size)
    rhs = np.zeros(size)
    escape = np.zeros(size)
    for k, q in zip(law.steps, law.probs):
        target = j - k
        rhs += q * values(y - target * law.unit)
        inside = target >= 0
        cols = np.minimum(target[inside], depth)
        np.subtract.at(a, (j[inside], cols), q)
        escape += q * (target > depth)
    sol = linalg.solve(a, np.column_stack([rhs, escape]))
    return sol[:, 0], float(sol[0, 1])


def ladder_stats_exact_skipfree(
    walk: StepDistribution,
    p: ProblemSpec,
    y: float,
    depth: int = SKIPFREE_DEPTH,
) -> LadderStats:
    """
    Ladder statistics of a walk whose upward steps are one lattice unit.

    The ladder height is then exactly one unit and E(tau+) = unit / E(X_1);
    non-constant costs solve the truncated first-passage system.
    """
    law = lattice_law(walk)
    if law is None or law.max_up != 1:
        raise MethodInapplicableError(
            f"step law '{walk.kind}' is not upward skip-free on a lattice"
        )
    if law.mean_steps <= 0:
        raise LadderEpochNotIntegrableError(
            f"E(X_1) = {law.unit * law.mean_steps:g} <= 0, tau+ is not integrable"
        )
    e_tau = 1.0 / law.mean_steps
    up = y + law.unit

    bound = 0.0
    c = constant_cost(p.cost)
    if c is not None:
        e_cost = c * e_tau
    else:
        costs, esc = _skipfree_system(
            law, y, lambda x: eval_cost(p.cost, x), depth
        )
        e_cost = float(costs[0])
        bound = esc * float(costs[-1])

    weight = weight_of(p)
    g = constant_cost(weight)
    if g is not None:
        e_weight = g * e_tau
    else:
        weights, esc = _skipfree_system(
            law, y, lambda x: eval_cost(weight, x), depth
        )
        e_weight = float(weights[0])
        bound = max(bound, esc * float(weights[-1]))

    exit_payoff = float(eval_payoff(p.payoff, up))
    return LadderStats(
        y=float(y),
        e_tau_plus=e_tau,
        phi=exit_payoff - e_cost,
        e_cost=e_cost,
        e_weight=e_weight,
        e_exit_payoff=exit_payoff,
        method="exact_skipfree",
        truncation_bound=bound,
    )


# --- exact: finite chains ---------------------------------------------------------------


def ladder_stats_finite_chain(
    chain: FiniteChainSpec, p: ProblemSpec, y: float
) -> LadderStats:
    i = chain_state_index(chain, y)
    if i is None:
        raise MethodInapplicableError(f"y={y:g} is not a chain state")
    states = np.asarray(chain.states)
    kernel = np.asarray(chain.kernel, dtype=float)
    below = states <= states[i]
    if below.all():
        raise LadderEpochNotIntegrableError(f"no state lies above y={y:g}")
    radius = sub_kernel_spectral_radius(chain, states[i])
    if radius >= 1.0 - 1e-9:
        raise LadderEpochNotIntegrableError(
            f"sub-kernel on states <= {y:g} has spectral radius {radius:.12g}"
        )

    rows = kernel[below]
    q = rows[:, below]
    above = ~below
    rhs = np.column_stack(
        [
            np.ones(q.shape[0]),
            rows @ eval_cost(p.cost, states),
            rows @ eval_cost(weight_of(p), states),
            rows[:, above] @ eval_payoff(p.payoff, states[above]),
        ]
    )
    sol = linalg.solve(np.eye(q.shape[0]) - q, rhs)
    row = int(np.searchsorted(np.flatnonzero(below), i))
    e_tau, e_cost, e_weight, exit_payoff = (float(v) for v in sol[row])
    return LadderStats(
        y=float(states[i]),
        e_tau_plus=e_tau,
        phi=exit_payoff - e_cost,
        e_cost=e_cost,
        e_weight=e_weight,
        e_exit_payoff=exit_payoff,
        method="exact_chain",
    )


# --- Monte Carlo -----------------------------------------------------------------------


def _stats_from_moments(
    y: float,
    moments: Moments,
    cfg: MCConfig,
    censored_fraction: float,
    reliable: bool,
) -> LadderStats:
    z = z_value(cfg.ci_level)
    se = moments.stderr
    phi, phi_se = moments.linear([0.0, -1.0, 0.0, 1.0])
    return LadderStats(
        y=float(y),
        e_tau_plus=float(moments.mean[TAU]),
        phi=phi,
        e_cost=float(moments.mean[COST]),
        e_weight=float(moments.mean[WEIGHT]),
        e_exit_payoff=float(moments.mean[EXIT]),
        ci_e_tau_plus=float(z * se[TAU]),
        ci_phi=float(z * phi_se),
        ci_e_cost=float(z * se[COST]),
        ci_e_weight=float(z * se[WEIGHT]),
        method="monte_carlo",
        paths=moments.n,
        censored_fraction=censored_fraction,
        reliable=reliable,
        moments=moments,
    )


def _ladder_block(
    p: ProblemSpec, y: float, max_steps: int, rng: np.random.Generator, n: int
) -> tuple[Moments, int]:
    init, step, position = make_stepper(p.process, y)
    weight = weight_of(p)
    state = init(n)
    samples = np.zeros((n, 4))
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        state[active] = step(state[active], rng)
        pos = position(state[active])
        samples[active, TAU] += 1.0
        samples[active, COST] += eval_cost(p.cost, pos)
        samples[active, WEIGHT] += eval_cost(weight, pos)
        done = pos > y
        samples[active[done], EXIT] = eval_payoff(p.payoff, pos[done])
        active = active[~done]
    finished = np.ones(n, dtype=bool)
    finished[active] = False
    return Moments.from_samples(samples[finished]), int(active.size)


def ladder_stats_mc(
    p: ProblemSpec, y: float, cfg: MCConfig, stream_key: tuple = ()
) -> LadderStats:
    """Simulate paths from y to the first strict new maximum."""
    if isinstance(p.process, LevySpec):
        raise MethodInapplicableError("ladder epochs of a Levy process are not discrete")
    keys = stream_key or (y,)
    parts = run_blocks(
        lambda rng, n: _ladder_block(p, y, cfg.max_steps, rng, n),
        cfg.paths,
        cfg,
        "ladder",
        *keys,
    )
    censored = sum(c for _, c in parts)
    frac, reliable = _censoring_check(censored, cfg.paths, f"ladder epoch from y={y:g}")
    moments = Moments.merge_all([m for m, _ in parts])
    return _stats_from_moments(y, moments, cfg, frac, reliable)


def _excursion_block(
    walk: StepDistribution, max_steps: int, rng: np.random.Generator, n: int
) -> tuple[np.ndarray, np.ndarray, int]:
    init, step, position = make_stepper(walk, 0.0)
    state = init(n)
    active = np.arange(n)
    ids, sums = [], []
    for _ in range(max_steps):
        if active.size == 0:
            break
        state[active] = step(state[active], rng)
        pos = position(state[active])
        ids.append(active)
        sums.append(pos)
        active = active[pos <= 0.0]
    finished = np.ones(n, dtype=bool)
    finished[active] = False
    ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    sums = np.concatenate(sums) if sums else np.zeros(0)
    keep = finished[ids]
    ids, sums = ids[keep], sums[keep]
    order = np.argsort(ids, kind="stable")
    lengths = np.bincount(ids, minlength=n)[finished]
    return sums[order], lengths, int(active.size)


def simulate_excursions(walk: StepDistribution, cfg: MCConfig) -> PooledExcursions:
    parts = run_blocks(
        lambda rng, n: _excursion_block(walk, cfg.max_steps, rng, n),
        cfg.paths,
        cfg,
        "excursions",
    )
    sums = np.concatenate([s for s, _, _ in parts])
    lengths = np.concatenate([ln for _, ln, _ in parts])
    censored = sum(c for _, _, c in parts)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    return PooledExcursions(
        partial_sums=sums,
        starts=starts,
        lengths=lengths,
        simulated=cfg.paths,
        censored=censored,
    )


def pooled_excursions(
    walk: StepDistribution, cfg: MCConfig, store: ExcursionStore | None = None
) -> PooledExcursions:
    """One shared sample of ladder excursions, reused for every start y."""
    store = _default_store if store is None else store
    pooled = store.get_or_simulate(walk, cfg, lambda: simulate_excursions(walk, cfg))
    _censoring_check(pooled.censored, pooled.simulated, "pooled excursions")
    if pooled.paths == 0:
        raise EstimationFailedError("no pooled excursion finished")
    return pooled


def ladder_stats_pooled(
    p: ProblemSpec, pooled: PooledExcursions, y: float, cfg: MCConfig
) -> LadderStats:
    """Ladder statistics at y from a pooled random-walk sample."""
    pos = y + pooled.partial_sums
    samples = np.column_stack(
        [
            pooled.lengths.astype(float),
            pooled.path_sums(eval_cost(p.cost, pos)),
            pooled.path_sums(eval_cost(weight_of(p), pos)),
            eval_payoff(p.payoff, y + pooled.ladder_heights),
        ]
    )
    frac = pooled.censored_fraction
    return _stats_from_moments(
        y, Moments.from_samples(samples), cfg, frac, frac <= CENSOR_WARN
    )


def ladder_stats(
    p: ProblemSpec, y: float, cfg: MCConfig, stream_key: tuple = ()
) -> LadderStats:
    """Exact backend when the structure allows it, Monte Carlo otherwise."""
    proc = p.process
    if isinstance(proc, FiniteChainSpec):
        return ladder_stats_finite_chain(proc, p, y)
    if isinstance(proc, StepDistribution) and is_skip_free(proc):
        return ladder_stats_exact_skipfree(proc, p, y)
    return ladder_stats_mc(p, y, cfg, stream_key)


# --- the h-hat transform ------------------------------------------------------------------


def _records_block(
    levy: LevySpec,
    dt: float,
    cutoff: float,
    max_steps: int,
    rng: np.random.Generator,
    n: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Levels of the new running minima of skeleton paths started at 0."""
    pos = np.zeros(n)
    run_min = np.zeros(n)
    active = np.arange(n)
    ids, levels = [], []
    for _ in range(max_steps):
        if active.size == 0:
            break
        pos[active] += sample_levy_increments(levy, dt, rng, active.size)
        record = active[pos[active] < run_min[active]]
        run_min[record] = pos[record]
        ids.append(record)
        levels.append(pos[record])
        active = active[pos[active] - run_min[active] < cutoff]
    finished = np.ones(n, dtype=bool)
    finished[active] = False
    ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    levels = np.concatenate(levels) if levels else np.zeros(0)
    keep = finished[ids]
    return ids[keep], levels[keep], finished


def _skeleton_hat(
    levy: LevySpec,
    cost: CostSpec,
    grid: np.ndarray,
    cfg: MCConfig,
    dt: float,
) -> tuple[np.ndarray, np.ndarray]:
    cutoff = 10.0 * levy_variance(levy) / (2.0 * levy_mean(levy))
    parts = run_blocks(
        lambda rng, n: _records_block(levy, dt, cutoff, cfg.max_steps, rng, n),
        cfg.paths,
        cfg,
        "hat",
        dt,
    )
    censored = sum(int((~fin).sum()) for _, _, fin in parts)
    _censoring_check(censored, cfg.paths, "descending ladder skeleton")

    z = z_value(cfg.ci_level)
    values = np.empty(grid.size)
    halves = np.empty(grid.size)
    for gi, y in enumerate(grid):
        blocks = []
        for ids, levels, fin in parts:
            num = np.bincount(ids, weights=eval_cost(cost, y + levels), minlength=fin.size)
            cnt = np.bincount(ids, minlength=fin.size).astype(float)
            blocks.append(Moments.from_samples(np.column_stack([num, cnt])[fin]))
        mom = Moments.merge_all(blocks)
        r, se, den, _ = mom.ratio([1.0, 0.0], [0.0, 1.0])
        if den <= 0:
            raise EstimationFailedError("skeleton paths recorded no running minima")
        values[gi], halves[gi] = r, z * se
    return values, halves


def _finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None


@dataclass(frozen=True)
class PassageCalibration:
    constant: float
    sensitivity: float
    additivity: float


def _passage_clock(
    levy: LevySpec, cfg: MCConfig, dt: float, height: float
) -> tuple[float, float]:
    """E(tau_x) and the mean ladder clock dt * E(N_x) for the passage above x."""
    n = min(cfg.paths, CALIBRATION_PATHS)
    rng = substream(cfg.seed, "calibration", height, dt)
    sample = levy_skeleton_passage(levy, 0.0, height, dt, cfg.max_steps, rng, n)
    done = ~sample.censored
    if not done.any():
        return math.nan, math.nan
    return float(sample.time[done].mean()), dt * float(sample.records[done].mean())


def passage_calibration(
    levy: LevySpec, cfg: MCConfig, dt: float
) -> PassageCalibration:
    """
    Normalization of the ladder clock by first-passage matching.

    The ladder height process runs on a clock that counts new running maxima,
    N_x up to the first passage above x, in units of dt. The constant
    kappa(x) = E(tau_x) / (dt E(N_x)) makes its level-passage times match the
    first-passage times of the process at height x; it is pinned at x = 1.
    `sensitivity` is |kappa(2) / kappa(1) - 1|, the change when the constant
    is pinned at x = 2 instead, and `additivity` is |E(tau_2) / (2 E(tau_1)) - 1|.
    """
    t1, clock1 = _passage_clock(levy, cfg, dt, CALIBRATION_HEIGHT)
    t2, clock2 = _passage_clock(levy, cfg, dt, 2.0 * CALIBRATION_HEIGHT)
    kappa1, kappa2 = t1 / clock1, t2 / clock2
    return PassageCalibration(
        constant=kappa1,
        sensitivity=abs(kappa2 / kappa1 - 1.0),
        additivity=abs(t2 / (2.0 * t1) - 1.0),
    )


def hat_transform(
    levy: LevySpec, cost: CostSpec, grid, cfg: MCConfig
) -> HatFunction:
    """
    h-hat(y): expected h-cost collected along the descending ladder structure.

    Normalized so that constant h = c gives h-hat = c for every process.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    mean = levy_mean(levy)
    if mean <= 0:
        raise InapplicableError(f"E(X_1) = {mean:g} is not positive")

    zeros = np.zeros(grid.size)
    c = constant_cost(cost)
    if levy.kind == "bm_drift":
        mu, sigma = levy.params["mu"], levy.params["sigma"]
        if c is not None:
            values = np.full(grid.size, c)
        else:
            values = np.array([bm_hat(mu, sigma, y, cost) for y in grid])
        return HatFunction(grid, values, zeros, "analytic_bm", calibration_sensitivity=0.0)
    if c is not None:
        return HatFunction(grid, np.full(grid.size, c), zeros, "mc_skeleton")

    dt = cfg.skeleton_dt
    values, halves = _skeleton_hat(levy, cost, grid, cfg, dt)
    refinements, converged = 0, False
    while refinements < HAT_MAX_REFINEMENTS:
        finer_values, finer_halves = _skeleton_hat(levy, cost, grid, cfg, dt / 2)
        refinements += 1
        dt /= 2
        slack = HAT_REL_CHANGE * np.abs(values) + np.hypot(halves, finer_halves)
        values, halves, previous = finer_values, finer_halves, values
        if np.all(np.abs(values - previous) <= slack):
            converged = True
            break
    if not converged:
        logger.warning(
            "h-hat still moving after %d skeleton refinements (dt=%g)", refinements, dt
        )
    calibration = passage_calibration(levy, cfg, dt)
    logger.info(
        "h-hat on %d points, dt=%g, ladder clock constant %.4g (sensitivity %.3g)",
        grid.size,
        dt,
        calibration.constant,
        calibration.sensitivity,
    )
    return HatFunction(
        grid,
        values,
        halves,
        "mc_skeleton",
        skeleton_dt=dt,
        refinements=refinements,
        converged=converged,
        calibration_constant=_finite_or_none(calibration.constant),
        calibration_sensitivity=_finite_or_none(calibration.sensitivity),
        passage_additivity=_finite_or_none(calibration.additivity),
    )
