import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from stopping_thresholds.errors import DPFailedError, MethodInapplicableError
from stopping_thresholds.model import (
    check_process,
    eval_cost,
    eval_payoff,
    lattice_law,
)
from stopping_thresholds.settings import FiniteChainSpec, ProblemSpec, StepDistribution

logger = logging.getLogger(__name__)

MAX_SWEEPS = 1_000_000
STOP_TOL = 1e-9
PENALTY_FACTOR = 10.0
LOWER_BOUNDARIES = ("reflect_penalty", "reflect")


@dataclass(frozen=True)
class DPSolution:
    states: np.ndarray
    values: np.ndarray
    gamma: np.ndarray
    stopping_set: np.ndarray
    iterations: int
    residual: float
    lower_boundary: str = "reflect_penalty"
    domain: tuple[float, float] | None = None
    # bottom states that can land below lo in one step
    boundary_layer: int = 0

    def interior(self) -> np.ndarray:
        mask = np.ones(self.states.size, dtype=bool)
        mask[: self.boundary_layer] = False
        return mask

    def value_at(self, y: float) -> float:
        i = int(np.argmin(np.abs(self.states - y)))
        if not math.isclose(self.states[i], y, abs_tol=1e-9):
            raise KeyError(f"{y:g} is not a DP state")
        return float(self.values[i])


@dataclass(frozen=True)
class Equivalence:
    matches: bool
    verdict: str
    mismatched_states: list[float] = field(default_factory=list)


def _lattice_operator(
    p: ProblemSpec, walk: StepDistribution, domain: tuple[float, float], lower: str
):
    """
    Transition matrix on the truncated lattice plus the constant part of one
    Bellman step. Landings above hi stop at once; landings below lo reflect to
    lo and, under `reflect_penalty`, are charged gamma(lo) - 10 (1 + |gamma(lo)|).
    Plain `reflect` skips the charge and is kept for boundary diagnostics.
    """
    law = lattice_law(walk)
    if law is None:
        raise MethodInapplicableError("value iteration needs a lattice walk or a chain")
    lo_k = math.ceil(domain[0] / law.unit - 1e-9)
    hi_k = math.floor(domain[1] / law.unit + 1e-9)
    if hi_k <= lo_k:
        raise ValueError(f"domain {domain} holds fewer than two lattice states")
    ks = np.arange(lo_k, hi_k + 1)
    states = ks * law.unit
    m = states.size
    gamma_lo = float(eval_payoff(p.payoff, states[0]))
    penalty = gamma_lo - PENALTY_FACTOR * (1.0 + abs(gamma_lo))

    rows, cols, vals = [], [], []
    const = np.zeros(m)
    expected_cost = np.zeros(m)
    idx = np.arange(m)
    for k, q in zip(law.steps, law.probs):
        target = idx + k
        above = target >= m
        below = target < 0
        inside = ~above & ~below
        landing = states[0] + target * law.unit
        expected_cost += q * eval_cost(p.cost, np.maximum(landing, states[0]))
        const[above] += q * eval_payoff(p.payoff, landing[above])
        rows.append(idx[inside])
        cols.append(target[inside])
        vals.append(np.full(int(inside.sum()), q))
        rows.append(idx[below])
        cols.append(np.zeros(int(below.sum()), dtype=np.int64))
        vals.append(np.full(int(below.sum()), q))
        if lower == "reflect_penalty":
            const[below] += q * penalty
    matrix = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, m),
    )
    layer = max(-int(min(law.steps)), 0)
    return states, matrix, const - expected_cost, layer


def _chain_operator(chain: FiniteChainSpec, p: ProblemSpec):
    states = np.asarray(chain.states, dtype=float)
    kernel = np.asarray(chain.kernel, dtype=float)
    matrix = sparse.csr_matrix(kernel)
    return states, matrix, -(kernel @ eval_cost(p.cost, states)), 0


def dp_value_iteration(
    p: ProblemSpec,
    domain: tuple[float, float] | None,
    tol: float = 1e-10,
    lower_boundary: str = "reflect_penalty",
    max_sweeps: int = MAX_SWEEPS,
) -> DPSolution:
    """
    Jacobi value iteration V <- max(gamma, E[V(Y_1)] - E[h(Y_1)]) from V = gamma.
    """
    proc = p.process
    check_process(proc)
    if isinstance(proc, FiniteChainSpec):
        states, matrix, const, layer = _chain_operator(proc, p)
        domain = (float(states[0]), float(states[-1]))
    elif isinstance(proc, StepDistribution):
        if domain is None:
            raise ValueError("a lattice walk needs a truncation domain")
        if lower_boundary not in LOWER_BOUNDARIES:
            raise ValueError(f"unknown lower boundary rule '{lower_boundary}'")
        states, matrix, const, layer = _lattice_operator(p, proc, domain, lower_boundary)
    else:
        raise MethodInapplicableError("value iteration needs a lattice walk or a chain")

    gamma = eval_payoff(p.payoff, states)
    values = gamma.copy()
    residual = np.inf
    for sweep in range(1, max_sweeps + 1):
        updated = np.maximum(gamma, matrix @ values + const)
        residual = float(np.max(np.abs(updated - values)))
        values = updated
        if residual < tol:
            logger.info(
                "Value iteration converged after %d sweeps on %d states", sweep, states.size
            )
            return DPSolution(
                states=states,
                values=values,
                gamma=gamma,
                stopping_set=values - gamma <= STOP_TOL,
                iterations=sweep,
                residual=residual,
                lower_boundary=lower_boundary,
                domain=(float(domain[0]), float(domain[1])),
                boundary_layer=layer,
            )
    raise DPFailedError(
        f"value iteration did not converge in {max_sweeps} sweeps (residual {residual:g})"
    )


def solve_dp(
    p: ProblemSpec,
    guess: float,
    tol: float = 1e-10,
    lower_boundary: str = "reflect_penalty",
    domain: tuple[float, float] | None = None,
    max_widenings: int = 6,
) -> DPSolution:
    """
    Value iteration on [guess - 40, guess + 15] lattice units, widened until V
    at the states near the guess moves by less than 10 * tol.
    """
    proc = p.process
    if isinstance(proc, FiniteChainSpec):
        return dp_value_iteration(p, None, tol, lower_boundary)
    law = lattice_law(proc) if isinstance(proc, StepDistribution) else None
    if law is None:
        raise MethodInapplicableError("value iteration needs a lattice walk or a chain")
    if domain is not None:
        return dp_value_iteration(p, domain, tol, lower_boundary)

    unit = law.unit
    lo, hi = guess - 40 * unit, guess + 15 * unit
    solution = dp_value_iteration(p, (lo, hi), tol, lower_boundary)
    probes = np.arange(math.ceil((guess - 5 * unit) / unit), math.floor(guess / unit) + 1) * unit
    for _ in range(max_widenings):
        lo, hi = lo - 40 * unit, hi + 15 * unit
        wider = dp_value_iteration(p, (lo, hi), tol, lower_boundary)
        change = max(abs(wider.value_at(y) - solution.value_at(y)) for y in probes)
        solution = wider
        if change < 10 * tol:
            break
        logger.debug("DP boundary sensitivity %g, widening to (%g, %g)", change, lo, hi)
    return solution


def dp_threshold_equivalence(solution: DPSolution, threshold) -> Equivalence:
    """
    Compare the DP stopping set with the threshold rule on the DP states above
    the bottom boundary layer, where the penalty can make stopping optimal.
    """
    width = threshold.bracket[1] - threshold.bracket[0]
    slack = max(1e-9, width)
    states = solution.states
    if threshold.boundary == "nonstrict":
        rule = states >= threshold.x_bar - slack
    else:
        rule = states > threshold.x_bar + slack
    mismatch = (rule != solution.stopping_set) & solution.interior()
    if not mismatch.any():
        return Equivalence(True, "stopping_set matches threshold rule")
    bad = [float(s) for s in states[mismatch]]
    return Equivalence(
        False,
        f"stopping_set differs from threshold rule at {len(bad)} states",
        bad,
    )
