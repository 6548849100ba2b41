import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import special

from stopping_thresholds.errors import ExtrapolationError, InfeasibleProblemError
from stopping_thresholds.estimators import Moments
from stopping_thresholds.settings import (
    CostSpec,
    FiniteChainSpec,
    JumpLaw,
    LevySpec,
    LookupTable,
    MCConfig,
    PayoffSpec,
    ProbeGrid,
    ProblemSpec,
    StepDistribution,
)
from stopping_thresholds.streams import run_blocks

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
TRANSIENCE_HORIZON = 2048
_UNIT_WEIGHT = CostSpec(kind="constant", params={"c": 1.0})


def _as_output(x, values: np.ndarray):
    if np.ndim(x) == 0:
        return float(values)
    return values


def _interp(table: LookupTable, x: np.ndarray) -> np.ndarray:
    xs = np.asarray(table.x)
    if table.extrapolate == "refuse":
        outside = (x < xs[0]) | (x > xs[-1])
        if np.any(outside):
            bad = np.asarray(x)[outside].ravel()[0]
            raise ExtrapolationError(
                f"x={bad:g} outside lookup table range [{xs[0]:g}, {xs[-1]:g}]"
            )
    return np.interp(x, xs, np.asarray(table.y))


def _table_slope(table: LookupTable, x: np.ndarray) -> np.ndarray:
    xs, ys = np.asarray(table.x), np.asarray(table.y)
    slopes = np.diff(ys) / np.diff(xs)
    idx = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(slopes) - 1)
    inside = (x >= xs[0]) & (x <= xs[-1])
    return np.where(inside, slopes[idx], 0.0)


def eval_payoff(spec: PayoffSpec, x):
    """gamma(x); accepts a scalar or an array."""
    arr = np.asarray(x, dtype=float)
    prm = spec.params
    match spec.kind:
        case "piecewise_linear_cap":
            v = np.minimum(arr, prm["K"])
        case "softplus_concave":
            v = -prm["s"] * np.logaddexp(0.0, -(arr - prm["a"]) / prm["s"])
        case "lookup_table":
            v = _interp(spec.table, arr)
        case "linear":
            v = prm["a"] + prm["b"] * arr
        case "exponential":
            v = np.exp(arr / prm["rate"])
        case "constant":
            v = np.full_like(arr, prm["K"])
    return _as_output(x, spec.scale * v + spec.offset)


def eval_payoff_derivative(spec: PayoffSpec, x):
    """gamma'(x); right derivative at kinks and table knots."""
    arr = np.asarray(x, dtype=float)
    prm = spec.params
    match spec.kind:
        case "piecewise_linear_cap":
            d = np.where(arr < prm["K"], 1.0, 0.0)
        case "softplus_concave":
            d = special.expit(-(arr - prm["a"]) / prm["s"])
        case "lookup_table":
            d = _table_slope(spec.table, arr)
        case "linear":
            d = np.full_like(arr, prm["b"])
        case "exponential":
            d = np.exp(arr / prm["rate"]) / prm["rate"]
        case "constant":
            d = np.zeros_like(arr)
    return _as_output(x, spec.scale * d)


def payoff_kinks(spec: PayoffSpec) -> list[float]:
    if spec.kind == "piecewise_linear_cap":
        return [spec.params["K"]]
    if spec.kind == "lookup_table":
        return list(spec.table.x)
    return []


def eval_cost(spec: CostSpec, x):
    """h(x) (or the weight g(x)); accepts a scalar or an array."""
    arr = np.asarray(x, dtype=float)
    prm = spec.params
    match spec.kind:
        case "constant":
            v = np.full_like(arr, prm["c"])
        case "affine_positive":
            v = np.maximum(prm["a"] + prm["b"] * arr, 0.0)
        case "lookup_table":
            v = _interp(spec.table, arr)
    return _as_output(x, v)


def constant_cost(spec: CostSpec) -> float | None:
    """The constant value of h when h does not depend on x, else None."""
    if spec.kind == "constant":
        return spec.params["c"]
    if spec.kind == "affine_positive" and spec.params["b"] == 0.0:
        return max(spec.params["a"], 0.0)
    return None


def weight_of(p: ProblemSpec) -> CostSpec:
    return p.weight if p.weight is not None else _UNIT_WEIGHT


# --- step laws -----------------------------------------------------------------


@dataclass(frozen=True)
class LatticeLaw:
    """A walk on unit * Z: integer step sizes and their probabilities."""

    unit: float
    steps: np.ndarray
    probs: np.ndarray

    @property
    def max_up(self) -> int:
        return int(self.steps.max())

    @property
    def mean_steps(self) -> float:
        return float(self.steps @ self.probs)


def lattice_law(walk: StepDistribution) -> LatticeLaw | None:
    """Reduce a lattice step law to integer steps; None for non-lattice kinds."""
    if walk.kind == "two_point":
        p, u, d = walk.params["p"], walk.params["u"], walk.params["d"]
        ratio = Fraction(u / d).limit_denominator(1000)
        if not math.isclose(ratio.numerator / ratio.denominator, u / d, rel_tol=1e-12):
            return None
        unit = u / ratio.numerator
        steps = np.array([ratio.numerator, -ratio.denominator])
        probs = np.array([p, 1.0 - p])
    elif walk.kind == "lattice_pmf":
        unit = walk.params["unit"]
        steps = np.asarray(walk.support, dtype=np.int64)
        probs = np.asarray(walk.probs, dtype=float)
    else:
        return None

    keep = probs > 0.0
    steps, probs = steps[keep], probs[keep]
    g = int(np.gcd.reduce(np.abs(steps[steps != 0]))) if np.any(steps != 0) else 1
    if g > 1:
        unit, steps = unit * g, steps // g
    return LatticeLaw(unit=unit, steps=steps.astype(np.int64), probs=probs)


def is_skip_free(walk: StepDistribution) -> bool:
    law = lattice_law(walk)
    return law is not None and law.max_up == 1


def jump_moments(jumps: JumpLaw) -> tuple[float, float]:
    """First and second moments of one jump."""
    m = jumps.params["mean"]
    if jumps.kind == "normal":
        return m, m * m + jumps.params["std"] ** 2
    return m, 2.0 * m * m


def levy_mean(levy: LevySpec) -> float:
    """E(X_1)."""
    prm = levy.params
    match levy.kind:
        case "bm_drift":
            return prm["mu"]
        case "cpp_drift":
            return prm["drift"] + prm["rate"] * jump_moments(levy.jumps)[0]
        case "jump_diffusion":
            return prm["mu"] + prm["rate"] * jump_moments(levy.jumps)[0]


def levy_variance(levy: LevySpec) -> float:
    """Var(X_1)."""
    prm = levy.params
    match levy.kind:
        case "bm_drift":
            return prm["sigma"] ** 2
        case "cpp_drift":
            return prm["rate"] * jump_moments(levy.jumps)[1]
        case "jump_diffusion":
            return prm["sigma"] ** 2 + prm["rate"] * jump_moments(levy.jumps)[1]


def step_mean(walk: StepDistribution) -> float:
    if walk.kind == "gaussian":
        return walk.params["m"]
    if walk.kind == "levy_increment":
        return levy_mean(walk.levy) * walk.params["dt"]
    if walk.kind == "two_point":
        prm = walk.params
        return prm["p"] * prm["u"] - (1.0 - prm["p"]) * prm["d"]
    law = lattice_law(walk)
    return law.unit * law.mean_steps


def step_std(walk: StepDistribution) -> float:
    if walk.kind == "gaussian":
        return walk.params["s"]
    if walk.kind == "levy_increment":
        return math.sqrt(levy_variance(walk.levy) * walk.params["dt"])
    law = lattice_law(walk)
    if law is None:
        prm = walk.params
        second = prm["p"] * prm["u"] ** 2 + (1.0 - prm["p"]) * prm["d"] ** 2
        return math.sqrt(max(second - step_mean(walk) ** 2, 0.0))
    m = law.mean_steps
    return law.unit * math.sqrt(max(float((law.steps**2) @ law.probs) - m * m, 0.0))


def _jumps_can_be_positive(jumps: JumpLaw) -> bool:
    if jumps.kind == "normal":
        return jumps.params["std"] > 0 or jumps.params["mean"] > 0
    return jumps.params["mean"] > 0


def sample_jump_sums(
    jumps: JumpLaw, counts: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Sum of `counts[i]` i.i.d. jumps, exactly, for every i."""
    m = jumps.params["mean"]
    if jumps.kind == "normal":
        z = rng.standard_normal(counts.shape)
        return m * counts + jumps.params["std"] * np.sqrt(counts) * z
    g = rng.gamma(np.maximum(counts, 1), abs(m))
    return np.where(counts > 0, np.sign(m) * g, 0.0)


def sample_levy_increments(
    levy: LevySpec, dt: float, rng: np.random.Generator, size: int
) -> np.ndarray:
    """Exact draws of X_{t+dt} - X_t."""
    prm = levy.params
    match levy.kind:
        case "bm_drift":
            return rng.normal(prm["mu"] * dt, prm["sigma"] * math.sqrt(dt), size)
        case "cpp_drift":
            counts = rng.poisson(prm["rate"] * dt, size)
            return prm["drift"] * dt + sample_jump_sums(levy.jumps, counts, rng)
        case "jump_diffusion":
            diffusion = rng.normal(prm["mu"] * dt, prm["sigma"] * math.sqrt(dt), size)
            counts = rng.poisson(prm["rate"] * dt, size)
            return diffusion + sample_jump_sums(levy.jumps, counts, rng)


def sample_lattice_steps(
    law: LatticeLaw, rng: np.random.Generator, size: int
) -> np.ndarray:
    """Integer steps in lattice units."""
    return rng.choice(law.steps, size=size, p=law.probs / law.probs.sum())


def sample_steps(
    walk: StepDistribution, rng: np.random.Generator, size: int
) -> np.ndarray:
    match walk.kind:
        case "gaussian":
            return rng.normal(walk.params["m"], walk.params["s"], size)
        case "levy_increment":
            return sample_levy_increments(walk.levy, walk.params["dt"], rng, size)
        case "two_point":
            prm = walk.params
            return np.where(rng.random(size) < prm["p"], prm["u"], -prm["d"])
        case "lattice_pmf":
            law = lattice_law(walk)
            return law.unit * sample_lattice_steps(law, rng, size)


# --- finite chains -----------------------------------------------------------------


def chain_cumulative(chain: FiniteChainSpec) -> np.ndarray:
    return np.cumsum(np.asarray(chain.kernel, dtype=float), axis=1)


def chain_step(
    cumulative: np.ndarray, idx: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    u = rng.random(idx.size)
    nxt = (u[:, None] >= cumulative[idx]).sum(axis=1)
    return np.minimum(nxt, cumulative.shape[1] - 1)


def chain_state_index(chain: FiniteChainSpec, y: float) -> int | None:
    states = np.asarray(chain.states)
    hits = np.flatnonzero(np.isclose(states, y, rtol=0.0, atol=1e-12))
    return int(hits[0]) if hits.size else None


def sub_kernel_spectral_radius(chain: FiniteChainSpec, y: float) -> float:
    """Spectral radius of the kernel restricted to states <= y."""
    states = np.asarray(chain.states)
    below = states <= y + 1e-12
    q = np.asarray(chain.kernel, dtype=float)[np.ix_(below, below)]
    if q.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(q))))


def make_stepper(process, y: float):
    """
    (init, step, position) callables for vectorized simulation started at y.

    Lattice walks move on integer offsets and chains on state indices, so
    revisits of a level compare equal exactly.
    """
    if isinstance(process, FiniteChainSpec):
        states = np.asarray(process.states)
        cum = chain_cumulative(process)
        i0 = chain_state_index(process, y)
        if i0 is None:
            raise ValueError(f"y={y:g} is not a state of the chain")
        return (
            lambda n: np.full(n, i0, dtype=np.int64),
            lambda s, rng: chain_step(cum, s, rng),
            lambda s: states[s],
        )
    if isinstance(process, LevySpec):
        raise TypeError("Levy processes are simulated on skeletons")
    law = lattice_law(process)
    if law is not None:
        return (
            lambda n: np.zeros(n, dtype=np.int64),
            lambda s, rng: s + sample_lattice_steps(law, rng, s.size),
            lambda s: y + law.unit * s,
        )
    return (
        lambda n: np.full(n, float(y)),
        lambda s, rng: s + sample_steps(process, rng, s.size),
        lambda s: s,
    )


# --- feasibility ---------------------------------------------------------------------


def check_process(process) -> None:
    """Raise InfeasibleProblemError for ill-posed step laws and kernels."""
    if isinstance(process, FiniteChainSpec):
        kernel = np.asarray(process.kernel, dtype=float)
        sums = kernel.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOL)
        if bad.size:
            raise InfeasibleProblemError(
                f"kernel rows {bad.tolist()} are not stochastic "
                f"(row sums {sums[bad].tolist()})"
            )
        upward = np.triu(kernel, k=1).sum(axis=1)
        if not np.any(upward > 0):
            raise InfeasibleProblemError("chain never moves upward: P(X_1 > 0) = 0")
        return

    if isinstance(process, LevySpec):
        positive = process.kind != "cpp_drift" or (
            process.params["drift"] > 0
            or (process.params["rate"] > 0 and _jumps_can_be_positive(process.jumps))
        )
        if not positive:
            raise InfeasibleProblemError("process never moves upward: P(X_1 > 0) = 0")
        return

    walk = process
    if walk.kind == "lattice_pmf":
        total = float(np.sum(walk.probs))
        if abs(total - 1.0) > PROB_TOL:
            raise InfeasibleProblemError(f"lattice probabilities sum to {total!r}")
    if walk.kind == "levy_increment":
        check_process(walk.levy)
        return
    if walk.kind == "gaussian":
        positive = walk.params["s"] > 0 or walk.params["m"] > 0
    else:
        law = lattice_law(walk)
        positive = law is not None and law.max_up > 0
        if law is None:
            positive = walk.params["p"] > 0
    if not positive:
        raise InfeasibleProblemError("walk never moves upward: P(X_1 > 0) = 0")


# --- continuous skeletons ---------------------------------------------------------------


@dataclass(frozen=True)
class PassageSample:
    time: np.ndarray
    exit_position: np.ndarray
    cost_integral: np.ndarray
    max_integral: np.ndarray
    censored: np.ndarray
    # new running maxima, the passage step included
    records: np.ndarray


def levy_skeleton_passage(
    levy: LevySpec,
    start: float,
    level: float,
    dt: float,
    max_steps: int,
    rng: np.random.Generator,
    n: int,
    cost: CostSpec | None = None,
    max_integrand=None,
) -> PassageSample:
    """
    Simulate n skeleton paths from `start` until they first exceed `level`.

    Integrals of h(X) and of `max_integrand(running max)` use the left-point
    rule on the skeleton.
    """
    pos = np.full(n, float(start))
    run_max = pos.copy()
    t = np.zeros(n)
    cost_int = np.zeros(n)
    max_int = np.zeros(n)
    records = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        if cost is not None:
            cost_int[active] += eval_cost(cost, pos[active]) * dt
        if max_integrand is not None:
            max_int[active] += max_integrand(run_max[active]) * dt
        pos[active] += sample_levy_increments(levy, dt, rng, active.size)
        t[active] += dt
        records[active] += pos[active] > run_max[active]
        run_max[active] = np.maximum(run_max[active], pos[active])
        active = active[pos[active] <= level]
    censored = np.zeros(n, dtype=bool)
    censored[active] = True
    return PassageSample(t, pos, cost_int, max_int, censored, records)


# --- diagnostics -----------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostics:
    process_kind: str
    drift: float
    drift_mc: float | None
    drift_mc_stderr: float | None
    drift_mc_consistent: bool | None
    drift_positive: bool
    transient_ok: bool | None
    transient_fraction: float | None
    payoff_monotone: bool
    payoff_violations: list[tuple[float, float]]
    payoff_derivative_ok: bool | None
    payoff_derivative_violations: list[float]
    cost_nonnegative: bool
    cost_monotone: bool
    cost_violations: list[tuple[float, float]]
    weight_positive: bool
    warnings: list[str] = field(default_factory=list)
    transience_horizon: int | None = None

    @property
    def passed(self) -> bool:
        return (
            self.drift_positive
            and self.transient_ok is not False
            and self.payoff_monotone
            and self.payoff_derivative_ok is not False
            and self.cost_nonnegative
            and self.weight_positive
        )


def probe_points(grid: ProbeGrid, table: LookupTable | None = None) -> np.ndarray:
    lo, hi = grid.lo, grid.hi
    if table is not None and table.extrapolate == "refuse":
        lo, hi = max(lo, table.x[0]), min(hi, table.x[-1])
    return np.linspace(lo, hi, grid.count)


def _decreasing_pairs(xs: np.ndarray, vs: np.ndarray) -> list[tuple[float, float]]:
    drops = np.flatnonzero(np.diff(vs) < -PROB_TOL * np.maximum(1.0, np.abs(vs[:-1])))
    return [(float(xs[i]), float(xs[i + 1])) for i in drops]


def _derivative_mismatches(spec: PayoffSpec, xs: np.ndarray) -> list[float]:
    eps = 1e-5 * np.maximum(1.0, np.abs(xs))
    kinks = np.asarray(payoff_kinks(spec))
    if kinks.size:
        near = np.min(np.abs(xs[:, None] - kinks[None, :]), axis=1) <= 2 * eps
        xs, eps = xs[~near], eps[~near]
    fd = (eval_payoff(spec, xs + eps) - eval_payoff(spec, xs - eps)) / (2 * eps)
    analytic = eval_payoff_derivative(spec, xs)
    bad = ~np.isclose(analytic, fd, rtol=1e-6, atol=1e-8)
    return [float(x) for x in xs[bad]]


def _drift_block(process, rng: np.random.Generator, n: int) -> Moments:
    if isinstance(process, LevySpec):
        draws = sample_levy_increments(process, 1.0, rng, n)
    else:
        draws = sample_steps(process, rng, n)
    return Moments.from_samples(draws[:, None])


def _gain_argmax_block(
    p: ProblemSpec, horizon: int, dt: float, rng: np.random.Generator, n: int
) -> np.ndarray:
    """Time index at which gamma(Y_k) - sum h(Y_i) peaks on each path."""
    proc = p.process
    if isinstance(proc, FiniteChainSpec):
        states = np.asarray(proc.states)
        cum = chain_cumulative(proc)
        idx = np.zeros(n, dtype=np.int64)
        pos = states[idx]
    else:
        pos = np.zeros(n)
    paid = np.zeros(n)
    best = np.asarray(eval_payoff(p.payoff, pos), dtype=float).copy()
    peak = np.zeros(n, dtype=np.int64)
    for k in range(1, horizon + 1):
        if isinstance(proc, FiniteChainSpec):
            idx = chain_step(cum, idx, rng)
            pos = states[idx]
        elif isinstance(proc, LevySpec):
            pos = pos + sample_levy_increments(proc, dt, rng, n)
        else:
            pos = pos + sample_steps(proc, rng, n)
        paid += eval_cost(p.cost, pos) * dt
        gain = eval_payoff(p.payoff, pos) - paid
        later = gain > best
        best[later] = gain[later]
        peak[later] = k
    return peak


def validate_problem(
    p: ProblemSpec, cfg: MCConfig, probes: ProbeGrid | None = None
) -> Diagnostics:
    """
    Feasibility evidence for a problem: drift, a transience heuristic and
    monotonicity probes. Nothing here proves integrability; it only reports.
    """
    probes = probes or ProbeGrid()
    proc = p.process
    check_process(proc)
    warnings: list[str] = []

    drift_mc = drift_se = consistent = None
    if isinstance(proc, FiniteChainSpec):
        states = np.asarray(proc.states)
        kernel = np.asarray(proc.kernel, dtype=float)
        drift = float(np.mean(kernel @ states - states))
        radii = [sub_kernel_spectral_radius(proc, y) for y in states[:-1]]
        drift_positive = all(r < 1.0 - 1e-9 for r in radii)
        if not drift_positive:
            warnings.append("some chain state cannot reach a higher state a.s.")
    else:
        drift = levy_mean(proc) if isinstance(proc, LevySpec) else step_mean(proc)
        parts = run_blocks(
            lambda rng, n: _drift_block(proc, rng, n), 1_000_000, cfg, "drift"
        )
        mom = Moments.merge_all(parts)
        drift_mc, drift_se = float(mom.mean[0]), float(mom.stderr[0])
        consistent = abs(drift_mc - drift) <= 4.0 * drift_se + 1e-12
        drift_positive = drift > 0.0
        if not consistent:
            warnings.append(
                f"sample mean {drift_mc:.6g} is more than 4 stderr from {drift:.6g}"
            )
    if not drift_positive:
        warnings.append(f"drift {drift:.6g} is not positive")
        logger.warning("Drift %.6g is not positive", drift)

    horizon = min(cfg.max_steps, TRANSIENCE_HORIZON)
    if horizon < cfg.max_steps:
        logger.info(
            "Transience check runs %d steps (max_steps %d is capped)", horizon, cfg.max_steps
        )
    dt = cfg.levy_delta if isinstance(proc, LevySpec) else 1.0
    n_paths = min(cfg.paths, 4096)
    transient_ok = transient_fraction = None
    try:
        peaks = run_blocks(
            lambda rng, n: _gain_argmax_block(p, horizon, dt, rng, n),
            n_paths,
            cfg.model_copy(update={"block_size": min(cfg.block_size, 512)}),
            "transience",
        )
        peaks = np.concatenate(peaks)
        transient_fraction = float(np.mean(peaks < horizon // 2))
        transient_ok = transient_fraction >= 0.95
        if not transient_ok:
            warnings.append(
                f"gain peaked in the second half of the {horizon}-step horizon on "
                f"{1 - transient_fraction:.1%} of paths"
            )
    except ExtrapolationError as e:
        warnings.append(f"transience check skipped: {e}")

    xs = probe_points(probes, p.payoff.table)
    gvals = eval_payoff(p.payoff, xs)
    payoff_violations = _decreasing_pairs(xs, gvals)
    derivative_bad: list[float] = []
    derivative_ok = None
    if p.payoff.kind != "lookup_table":
        derivative_bad = _derivative_mismatches(p.payoff, xs)
        derivative_ok = not derivative_bad

    hs = probe_points(probes, p.cost.table)
    hvals = eval_cost(p.cost, hs)
    cost_violations = _decreasing_pairs(hs, hvals)
    weight = weight_of(p)
    ws = probe_points(probes, weight.table)
    weight_positive = bool(np.all(eval_cost(weight, ws) > 0.0))

    if payoff_violations:
        logger.warning("Payoff decreases on %d probe pairs", len(payoff_violations))
    if cost_violations:
        warnings.append("cost is not non-decreasing on the probe grid")

    return Diagnostics(
        process_kind=proc.kind,
        drift=float(drift),
        drift_mc=drift_mc,
        drift_mc_stderr=drift_se,
        drift_mc_consistent=consistent,
        drift_positive=bool(drift_positive),
        transient_ok=transient_ok,
        transient_fraction=transient_fraction,
        payoff_monotone=not payoff_violations,
        payoff_violations=payoff_violations,
        payoff_derivative_ok=derivative_ok,
        payoff_derivative_violations=derivative_bad,
        cost_nonnegative=bool(np.all(hvals >= 0.0)),
        cost_monotone=not cost_violations,
        cost_violations=cost_violations,
        weight_positive=weight_positive,
        warnings=warnings,
        transience_horizon=horizon,
    )
