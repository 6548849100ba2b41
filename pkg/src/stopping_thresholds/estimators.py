from dataclasses import dataclass

import numpy as np
from scipy import stats


def z_value(ci_level: float) -> float:
    """Two-sided normal quantile for a confidence level."""
    return float(stats.norm.ppf(0.5 + ci_level / 2.0))


@dataclass(frozen=True)
class Moments:
    """
    Count, mean vector and co-moment matrix of a block of d-dimensional samples.

    Blocks merge with the parallel (Chan) update, and `merge_all` combines a
    list of blocks as a balanced pairwise tree in list order.
    """

    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, d: int) -> "Moments":
        return cls(0, np.zeros(d), np.zeros((d, d)))

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "Moments":
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        n, d = samples.shape
        if n == 0:
            return cls.empty(d)
        mean = samples.mean(axis=0)
        centred = samples - mean
        return cls(n, mean, centred.T @ centred)

    def merge(self, other: "Moments") -> "Moments":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / n)
        return Moments(n, mean, m2)

    @staticmethod
    def merge_all(parts: list["Moments"]) -> "Moments":
        if not parts:
            raise ValueError("nothing to merge")
        level = list(parts)
        while len(level) > 1:
            paired = [a.merge(b) for a, b in zip(level[0::2], level[1::2])]
            if len(level) % 2:
                paired.append(level[-1])
            level = paired
        return level[0]

    @property
    def cov(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self.m2)
        return self.m2 / (self.n - 1)

    @property
    def stderr(self) -> np.ndarray:
        if self.n == 0:
            return np.full(self.mean.shape, np.inf)
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None) / self.n)

    def linear(self, weights, offset: float = 0.0) -> tuple[float, float]:
        """Mean and standard error of `weights . X + offset`."""
        a = np.asarray(weights, dtype=float)
        var = float(a @ self.cov @ a)
        se = np.sqrt(max(var, 0.0) / self.n) if self.n else np.inf
        return float(a @ self.mean + offset), float(se)

    def ratio(
        self, num_weights, den_weights, num_offset: float = 0.0
    ) -> tuple[float, float, float, float]:
        """
        Delta-method ratio of two linear combinations.

        Returns (ratio, ratio_stderr, denominator_mean, denominator_stderr).
        """
        a = np.asarray(num_weights, dtype=float)
        b = np.asarray(den_weights, dtype=float)
        num = float(a @ self.mean + num_offset)
        den = float(b @ self.mean)
        cov = self.cov
        var_b = float(b @ cov @ b)
        den_se = np.sqrt(max(var_b, 0.0) / self.n) if self.n else np.inf
        if den == 0.0:
            return np.nan, np.inf, den, float(den_se)
        r = num / den
        var = float(a @ cov @ a) - 2.0 * r * float(a @ cov @ b) + r * r * var_b
        se = np.sqrt(max(var, 0.0) / self.n) / abs(den) if self.n else np.inf
        return r, float(se), den, float(den_se)
