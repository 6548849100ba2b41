import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e, legendre

from stopping_thresholds.errors import BracketNotFoundError, InapplicableError
from stopping_thresholds.model import (
    constant_cost,
    eval_cost,
    eval_payoff,
    levy_mean,
    sample_levy_increments,
)
from stopping_thresholds.oracle.brownian import bm_interval_expected_cost, bm_scale_exit
from stopping_thresholds.settings import (
    CostSpec,
    LevySpec,
    LookupTable,
    MCConfig,
    ProblemSpec,
    StepDistribution,
)
from stopping_thresholds.streams import run_blocks, substream
from stopping_thresholds.threshold import (
    Threshold,
    ThresholdValue,
    evaluate_f,
    evaluate_f_levy,
    find_root,
    random_walk_threshold,
    value_of_threshold,
)

logger = logging.getLogger(__name__)

BOUND_LIMIT = 1e3
TABLE_POINTS = 257
SUB_SKELETON = 16
HISTOGRAM_BINS = 32
DEFAULT_PROBE_OFFSETS = (2.0, 1.6, 1.2, 0.8, 0.4)


@dataclass(frozen=True)
class EmbeddedWalk:
    level: int
    scheme: str
    delta: float
    step: StepDistribution
    ceil_h: CostSpec
    weight: CostSpec | None
    real_time_per_step: float
    p_up: float | None = None
    snap_bias: float | None = None

    def problem(self, p: ProblemSpec) -> ProblemSpec:
        """The discrete problem solved at this level."""
        return ProblemSpec(
            process=self.step, payoff=p.payoff, cost=self.ceil_h, weight=self.weight
        )


@dataclass(frozen=True)
class LevelResult:
    level: int
    delta: float
    threshold: Threshold
    probes: list[float]
    snapped_probes: list[float]
    values: list[ThresholdValue]
    immediate_stop: bool = False


@dataclass(frozen=True)
class DiscretizationReport:
    scheme: str
    levels: list[int]
    deltas: list[float]
    thresholds: list[float]
    probes: list[float]
    values: list[list[float]]
    value_stderrs: list[list[float]]
    f_residuals: list[list[float]] | None
    monotone_values_ok: bool
    monotone_thresholds_ok: bool
    nested_grids_ok: bool
    limit_estimate: float
    richardson_order: float
    continuum_threshold: float | None = None
    value_violations: list[tuple[int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class FnConvergence:
    levels: list[int]
    deltas: list[float]
    probes: list[float]
    f_n: list[list[float]]
    targets: list[float]
    residuals: list[list[float]]
    halving_ratios: list[list[float]]
    orders: list[float]
    halving_ok: bool


def _working_grid(working_range: tuple[float, float]) -> np.ndarray:
    return np.linspace(working_range[0], working_range[1], TABLE_POINTS)


def _table_cost(xs: np.ndarray, values: np.ndarray) -> CostSpec:
    return CostSpec(
        kind="lookup_table",
        table=LookupTable(x=xs.tolist(), y=values.tolist(), extrapolate="clamp"),
    )


def _check_bounded(p: ProblemSpec, working_range: tuple[float, float]) -> None:
    xs = _working_grid(working_range)
    g = np.abs(eval_payoff(p.payoff, xs))
    h = np.abs(eval_cost(p.cost, xs))
    if g.max() > BOUND_LIMIT or h.max() > BOUND_LIMIT:
        raise InapplicableError(
            f"gamma or h exceeds {BOUND_LIMIT:g} on {working_range}; "
            "the time grid needs bounded payoff and cost"
        )


def _bm_step_cost(levy: LevySpec, cost: CostSpec, dt: float, xs: np.ndarray) -> np.ndarray:
    """E_x int_0^dt h(X_s) ds by Gauss-Legendre in s and Gauss-Hermite in X_s."""
    mu, sigma = levy.params["mu"], levy.params["sigma"]
    s_nodes, s_weights = legendre.leggauss(16)
    s = 0.5 * dt * (s_nodes + 1.0)
    z_nodes, z_weights = hermite_e.hermegauss(20)
    z_weights = z_weights / math.sqrt(2.0 * math.pi)
    out = np.zeros(xs.size)
    for si, wi in zip(s, s_weights):
        inner = xs[:, None] + mu * si + sigma * math.sqrt(si) * z_nodes[None, :]
        out += 0.5 * dt * wi * (eval_cost(cost, inner) @ z_weights)
    return out


def _jump_step_cost(
    levy: LevySpec, cost: CostSpec, dt: float, xs: np.ndarray, cfg: MCConfig, key
) -> np.ndarray:
    rng = substream(cfg.seed, "ceil-h", *key)
    n = min(cfg.paths, 4096)
    sub = dt / SUB_SKELETON
    pos = np.zeros(n)
    out = np.zeros(xs.size)
    for _ in range(SUB_SKELETON):
        half = sample_levy_increments(levy, sub / 2, rng, n)
        mid = pos + half
        out += sub * eval_cost(cost, xs[:, None] + mid[None, :]).mean(axis=1)
        pos = mid + sample_levy_increments(levy, sub / 2, rng, n)
    return out


def build_time_discretization(
    levy: LevySpec,
    p: ProblemSpec,
    n: int,
    cfg: MCConfig,
    working_range: tuple[float, float] = (-20.0, 20.0),
) -> EmbeddedWalk:
    """Observe the process on the grid k / 2^n."""
    if n < 0:
        raise ValueError("level must be >= 0")
    _check_bounded(p, working_range)
    dt = 2.0**-n
    if levy.kind == "bm_drift":
        mu, sigma = levy.params["mu"], levy.params["sigma"]
        step = StepDistribution(
            kind="gaussian", params={"m": mu * dt, "s": sigma * math.sqrt(dt)}
        )
    else:
        step = StepDistribution(kind="levy_increment", params={"dt": dt}, levy=levy)

    c = constant_cost(p.cost)
    if c is not None:
        ceil_h = CostSpec(kind="constant", params={"c": c * dt})
    else:
        xs = _working_grid(working_range)
        if levy.kind == "bm_drift":
            values = _bm_step_cost(levy, p.cost, dt, xs)
        else:
            values = _jump_step_cost(levy, p.cost, dt, xs, cfg, (n,))
        ceil_h = _table_cost(xs, np.maximum(values, 0.0))
    return EmbeddedWalk(
        level=n,
        scheme="time",
        delta=dt,
        step=step,
        ceil_h=ceil_h,
        weight=None,
        real_time_per_step=dt,
    )


def _exit_block(levy: LevySpec, delta: float, cfg: MCConfig, rng, n):
    """Skeleton exits from (-delta, delta) started at 0, with occupation counts."""
    dt = cfg.skeleton_dt
    edges = np.linspace(-delta, delta, HISTOGRAM_BINS + 1)
    occupation = np.zeros(HISTOGRAM_BINS)
    pos = np.zeros(n)
    time = np.zeros(n)
    active = np.arange(n)
    for _ in range(cfg.max_steps):
        if active.size == 0:
            break
        occupation += np.histogram(pos[active], bins=edges)[0] * dt
        pos[active] += sample_levy_increments(levy, dt, rng, active.size)
        time[active] += dt
        active = active[np.abs(pos[active]) < delta]
    finished = np.ones(n, dtype=bool)
    finished[active] = False
    return pos[finished], time[finished], occupation, int(active.size)


def _bm_spatial(levy: LevySpec, p: ProblemSpec, delta: float, working_range):
    mu, sigma = levy.params["mu"], levy.params["sigma"]
    p_up, e_dur = bm_scale_exit(mu, sigma, -delta, delta, 0.0)
    step = StepDistribution(
        kind="two_point", params={"p": p_up, "u": delta, "d": delta}
    )
    c = constant_cost(p.cost)
    if c is not None:
        ceil_h = CostSpec(kind="constant", params={"c": c * e_dur})
    else:
        lo = math.floor(working_range[0] / delta) * delta
        hi = math.ceil(working_range[1] / delta) * delta
        xs = np.arange(round((hi - lo) / delta) + 1) * delta + lo
        values = np.array(
            [
                bm_interval_expected_cost(mu, sigma, x - delta, x + delta, x, p.cost)
                for x in xs
            ]
        )
        ceil_h = _table_cost(xs, values)
    return step, ceil_h, p_up, e_dur, None


def _mc_spatial(
    levy: LevySpec, p: ProblemSpec, delta: float, n: int, working_range, cfg: MCConfig
):
    parts = run_blocks(
        lambda rng, k: _exit_block(levy, delta, cfg, rng, k),
        cfg.paths,
        cfg,
        "spatial-exit",
        n,
    )
    exits = np.concatenate([e for e, _, _, _ in parts])
    times = np.concatenate([t for _, t, _, _ in parts])
    occupation = sum(o for _, _, o, _ in parts)
    censored = sum(c for _, _, _, c in parts)
    if censored / cfg.paths > 0.10:
        raise InapplicableError(f"{censored / cfg.paths:.1%} of cell exits censored")

    # up-exits land on +1 cell; down-exits on the nearest grid point below
    cells = np.where(exits > 0, 1, np.minimum(np.rint(exits / delta), -1)).astype(np.int64)
    snap_bias = float(np.mean(np.abs(exits - cells * delta)))
    support, counts = np.unique(cells, return_counts=True)
    probs = counts / counts.sum()
    probs[-1] = 1.0 - probs[:-1].sum()
    step = StepDistribution(
        kind="lattice_pmf",
        params={"unit": delta},
        support=support.tolist(),
        probs=probs.tolist(),
    )
    e_dur = float(times.mean())
    p_up = float(np.mean(cells == 1))

    c = constant_cost(p.cost)
    if c is not None:
        ceil_h = CostSpec(kind="constant", params={"c": c * e_dur})
    else:
        centres = np.linspace(-delta, delta, HISTOGRAM_BINS + 1)
        centres = 0.5 * (centres[:-1] + centres[1:])
        density = occupation / times.size
        xs = _working_grid(working_range)
        values = eval_cost(p.cost, xs[:, None] + centres[None, :]) @ density
        ceil_h = _table_cost(xs, values)
    if snap_bias > 0:
        logger.info("Level %d grid-snap bias %.3g (mean |overshoot|)", n, snap_bias)
    return step, ceil_h, p_up, e_dur, snap_bias


def build_spatial_discretization(
    levy: LevySpec,
    p: ProblemSpec,
    n: int,
    working_range: tuple[float, float],
    cfg: MCConfig,
) -> EmbeddedWalk:
    """
    Observe the process each time it moves delta = 2^-n away from its last
    grid point. The embedded walk is upward skip-free on delta * Z.
    """
    if n < 0:
        raise ValueError("level must be >= 0")
    delta = 2.0**-n
    if levy.kind == "bm_drift":
        step, ceil_h, p_up, e_dur, snap = _bm_spatial(levy, p, delta, working_range)
    else:
        step, ceil_h, p_up, e_dur, snap = _mc_spatial(levy, p, delta, n, working_range, cfg)
    return EmbeddedWalk(
        level=n,
        scheme="spatial",
        delta=delta,
        step=step,
        ceil_h=ceil_h,
        weight=CostSpec(kind="constant", params={"c": e_dur}),
        real_time_per_step=e_dur,
        p_up=p_up,
        snap_bias=snap,
    )


def build_level(
    levy: LevySpec,
    p: ProblemSpec,
    n: int,
    scheme: str,
    working_range: tuple[float, float],
    cfg: MCConfig,
) -> EmbeddedWalk:
    if scheme == "time":
        return build_time_discretization(levy, p, n, cfg, working_range)
    if scheme == "spatial":
        return build_spatial_discretization(levy, p, n, working_range, cfg)
    raise ValueError(f"unknown scheme '{scheme}'")


def _snap(walk: EmbeddedWalk, y: float) -> float:
    if walk.scheme == "spatial":
        return math.floor(y / walk.delta + 1e-9) * walk.delta
    return y


def solve_level(
    walk: EmbeddedWalk,
    p: ProblemSpec,
    cfg: MCConfig,
    probes=(),
    bracket: tuple[float, float] = (-10.0, 10.0),
    tol: float = 1e-9,
) -> LevelResult:
    """Threshold and probe values of the embedded discrete problem."""
    discrete = walk.problem(p)
    snapped = [_snap(walk, y) for y in probes]
    try:
        threshold = random_walk_threshold(walk.step, discrete, cfg, bracket=bracket, tol=tol)
    except BracketNotFoundError:
        f_lo, _ = evaluate_f(discrete, bracket[0], cfg)
        if f_lo > 0:
            raise
        logger.info("Level %d: f <= 0 on the whole bracket, stop at once", walk.level)
        threshold = Threshold(
            x_bar=-math.inf,
            boundary="nonstrict",
            f_at_root=f_lo,
            ci=(f_lo, f_lo),
            bracket=(-math.inf, bracket[0]),
        )
        values = [
            ThresholdValue(g, 0.0, 0.0, g, 0.0, 0.0, 0.0, 0.0)
            for g in (float(eval_payoff(p.payoff, y)) for y in snapped)
        ]
        return LevelResult(
            walk.level, walk.delta, threshold, list(probes), snapped, values, True
        )

    values = [
        value_of_threshold(discrete, threshold.x_bar, threshold.boundary, y, cfg)
        for y in snapped
    ]
    logger.info("Level %d (%s): x_bar=%.6g", walk.level, walk.scheme, threshold.x_bar)
    return LevelResult(walk.level, walk.delta, threshold, list(probes), snapped, values)


def continuum_threshold(
    levy: LevySpec, p: ProblemSpec, cfg: MCConfig, bracket, tol: float = 1e-9
) -> float | None:
    """Root of the Levy f when the analytic backend exists."""
    if levy.kind != "bm_drift":
        return None
    continuum = ProblemSpec(process=levy, payoff=p.payoff, cost=p.cost)
    return find_root(continuum, bracket, cfg, tol).x_bar


def _richardson(thresholds: list[float]) -> tuple[float, float]:
    if len(thresholds) < 2 or not all(math.isfinite(t) for t in thresholds):
        return thresholds[-1], 1.0
    order = 1.0
    if len(thresholds) >= 3:
        a, b, c = thresholds[-3:]
        if (c - b) != 0 and (b - a) / (c - b) > 0:
            estimate = math.log2((b - a) / (c - b))
            if 0.5 <= estimate <= 3.0:
                order = estimate
    prev, last = thresholds[-2:]
    return last + (last - prev) / (2.0**order - 1.0), order


def solve_sequence(
    levy: LevySpec,
    p: ProblemSpec,
    n_list,
    probes,
    cfg: MCConfig,
    scheme: str = "spatial",
    working_range: tuple[float, float] = (-20.0, 20.0),
    bracket: tuple[float, float] = (-10.0, 10.0),
) -> DiscretizationReport:
    """
    Solve every level (concurrently), then check V_n non-decreasing at the
    probes within 3 standard errors and x_bar_n non-decreasing in n.
    """
    n_list = list(n_list)
    if not n_list or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("levels must be a non-empty increasing list")
    x_c = continuum_threshold(levy, p, cfg, bracket)
    if probes is None or len(probes) == 0:
        anchor = x_c
        if anchor is None:
            first = build_level(levy, p, n_list[0], scheme, working_range, cfg)
            anchor = solve_level(first, p, cfg, (), bracket).threshold.x_bar
        probes = [anchor - d for d in DEFAULT_PROBE_OFFSETS]
    probes = [float(y) for y in probes]

    inner = cfg.model_copy(update={"threads": 1})

    def run(n: int) -> LevelResult:
        walk = build_level(levy, p, n, scheme, working_range, inner)
        return solve_level(walk, p, inner, probes, bracket)

    if cfg.threads > 1 and len(n_list) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run, n_list))
    else:
        results = [run(n) for n in n_list]

    thresholds = [r.threshold.x_bar for r in results]
    values = [[v.value for v in r.values] for r in results]
    stderrs = [[v.stderr for v in r.values] for r in results]
    violations = []
    for li in range(len(results) - 1):
        for pi in range(len(probes)):
            slack = 3.0 * math.hypot(stderrs[li][pi], stderrs[li + 1][pi]) + 1e-9
            if values[li + 1][pi] < values[li][pi] - slack:
                violations.append((li + 1, pi))
    if violations:
        logger.warning("V_n decreases beyond 3 stderr at %d (level, probe) pairs", len(violations))
    tol = 1e-6
    monotone_thresholds = all(b >= a - tol for a, b in zip(thresholds, thresholds[1:]))
    deltas = [r.delta for r in results]
    nested = scheme != "time" or all(
        float(a / b).is_integer() for a, b in zip(deltas, deltas[1:])
    )
    limit, order = _richardson(thresholds)

    f_residuals = None
    if levy.kind == "bm_drift" and scheme == "spatial":
        f_residuals = check_fn_convergence(levy, p, n_list, probes, cfg).residuals

    return DiscretizationReport(
        scheme=scheme,
        levels=n_list,
        deltas=deltas,
        thresholds=thresholds,
        probes=probes,
        values=values,
        value_stderrs=stderrs,
        f_residuals=f_residuals,
        monotone_values_ok=not violations,
        monotone_thresholds_ok=monotone_thresholds,
        nested_grids_ok=nested,
        limit_estimate=limit,
        richardson_order=order,
        continuum_threshold=x_c,
        value_violations=violations,
    )


def check_fn_convergence(
    levy: LevySpec,
    p: ProblemSpec,
    n_list,
    probes,
    cfg: MCConfig,
    working_range: tuple[float, float] = (-20.0, 20.0),
) -> FnConvergence:
    """
    |f_n(x) - (A_H gamma(x) - h-hat(x))| per level and probe, where f_n is the
    spatial-scheme threshold function with the real-time denominator.
    Residuals should halve per level (ratio within [1.6, 2.4]).
    """
    if levy_mean(levy) <= 0:
        raise InapplicableError("f_n needs a positive mean")
    n_list = list(n_list)
    probes = [float(y) for y in probes]
    targets = [evaluate_f_levy(levy, p, x, cfg)[0] for x in probes]

    f_n, residuals, deltas = [], [], []
    for n in n_list:
        walk = build_spatial_discretization(levy, p, n, working_range, cfg)
        discrete = walk.problem(p)
        row = [evaluate_f(discrete, _snap(walk, x), cfg, stream_key=(n, i))[0]
               for i, x in enumerate(probes)]
        f_n.append(row)
        residuals.append([abs(a - t) for a, t in zip(row, targets)])
        deltas.append(walk.delta)

    ratios: list[list[float]] = []
    ok = True
    for prev, cur in zip(residuals, residuals[1:]):
        row = []
        for a, b in zip(prev, cur):
            if a < 1e-12 and b < 1e-12:
                row.append(math.nan)
                continue
            r = a / b if b > 0 else math.inf
            row.append(r)
            ok = ok and 1.6 <= r <= 2.4
        ratios.append(row)

    orders = []
    for pi in range(len(probes)):
        col = [residuals[k][pi] for k in range(len(n_list))]
        tail = col[-3:]
        if len(tail) >= 2 and all(v > 1e-12 for v in tail):
            slope = np.polyfit(np.arange(len(tail)), np.log2(tail), 1)[0]
            orders.append(float(-slope))
        else:
            orders.append(math.nan)

    return FnConvergence(
        levels=n_list,
        deltas=deltas,
        probes=probes,
        f_n=f_n,
        targets=targets,
        residuals=residuals,
        halving_ratios=ratios,
        orders=orders,
        halving_ok=ok,
    )
