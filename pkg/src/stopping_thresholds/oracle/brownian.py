"""
Closed forms for Brownian motion with drift, X_t = x + mu t + sigma W_t.

theta = 2 mu / sigma^2 throughout; exp(-theta x) is the scale function.
"""

import logging
import math

import numpy as np
from scipy import integrate

from stopping_thresholds.errors import OracleFailedError
from stopping_thresholds.model import constant_cost, eval_cost
from stopping_thresholds.settings import CostSpec

logger = logging.getLogger(__name__)

QUAD_EPSABS = 1e-8


def _theta(mu: float, sigma: float) -> float:
    return 2.0 * mu / (sigma * sigma)


def bm_scale_exit(
    mu: float, sigma: float, a: float, b: float, x: float
) -> tuple[float, float]:
    """
    Probability of leaving (a, b) at b, and the expected exit time, from x.
    """
    if not a < x < b:
        raise ValueError(f"need a < x < b, got a={a}, x={x}, b={b}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        if mu == 0.0:
            raise ValueError("a motionless process never leaves the interval")
        return (1.0, (b - x) / mu) if mu > 0 else (0.0, (x - a) / -mu)

    theta = _theta(mu, sigma)
    if abs(theta) * (b - a) < 1e-8:
        p_up = (x - a) / (b - a)
        return p_up, (x - a) * (b - x) / (sigma * sigma)

    if theta > 0:
        p_up = math.expm1(-theta * (x - a)) / math.expm1(-theta * (b - a))
    else:
        p_up = (
            math.exp(theta * (b - x))
            * math.expm1(theta * (x - a))
            / math.expm1(theta * (b - a))
        )
    e_time = (p_up * b + (1.0 - p_up) * a - x) / mu
    return p_up, e_time


def _quad(fn, lo: float, hi: float) -> float:
    # With full_output a fourth element (the message) appears only on failure.
    result = integrate.quad(fn, lo, hi, epsabs=QUAD_EPSABS, limit=200, full_output=1)
    if len(result) > 3:
        raise OracleFailedError(f"quadrature did not converge: {result[3]}")
    return float(result[0])


def bm_green_expected_cost(
    mu: float, sigma: float, x: float, y: float, h: CostSpec
) -> float:
    """E_x of the integral of h(X_s) up to the first passage above y."""
    if x > y:
        raise ValueError(f"need x <= y, got x={x}, y={y}")
    if mu <= 0:
        raise ValueError("first passage upward needs mu > 0")
    if x == y:
        return 0.0
    c = constant_cost(h)
    if c is not None:
        return c * (y - x) / mu

    theta = _theta(mu, sigma)
    # z in [x, y]: (1 - e^{-theta (y - z)}) / mu
    upper = _quad(
        lambda z: float(eval_cost(h, z)) * -math.expm1(-theta * (y - z)) / mu, x, y
    )
    # z = x - u below the start
    scale = -math.expm1(-theta * (y - x)) / mu
    lower = _quad(
        lambda u: float(eval_cost(h, x - u)) * math.exp(-theta * u) * scale,
        0.0,
        np.inf,
    )
    return upper + lower


def bm_hat(mu: float, sigma: float, y: float, h: CostSpec) -> float:
    """theta * int_0^inf h(y - u) e^{-theta u} du."""
    c = constant_cost(h)
    if c is not None:
        return c
    theta = _theta(mu, sigma)
    return theta * _quad(
        lambda u: float(eval_cost(h, y - u)) * math.exp(-theta * u), 0.0, np.inf
    )


def _scale_gap(theta: float, w: float) -> float:
    if abs(theta * w) < 1e-12:
        return w
    return -math.expm1(-theta * w) / theta


def bm_interval_expected_cost(
    mu: float, sigma: float, a: float, b: float, x: float, h: CostSpec
) -> float:
    """E_x of the integral of h(X_s) up to the exit from (a, b)."""
    if not a < x < b:
        raise ValueError(f"need a < x < b, got a={a}, x={x}, b={b}")
    c = constant_cost(h)
    if c is not None:
        return c * bm_scale_exit(mu, sigma, a, b, x)[1]

    theta = _theta(mu, sigma)
    norm = 2.0 / (sigma * sigma * _scale_gap(theta, b - a))
    left = _quad(
        lambda z: float(eval_cost(h, z))
        * _scale_gap(theta, z - a)
        * math.exp(-theta * (x - z)),
        a,
        x,
    )
    right = _quad(lambda z: float(eval_cost(h, z)) * _scale_gap(theta, b - z), x, b)
    return norm * (_scale_gap(theta, b - x) * left + _scale_gap(theta, x - a) * right)
