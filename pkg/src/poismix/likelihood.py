"""Poisson-mixture log-likelihood and its directional derivative.

The objective is the per-observation average

    phi(G) = mean_i log sum_m w_m exp(-lambda_m r_i) (lambda_m r_i)^x_i

with the ``1 / x_i!`` constant left out; it does not depend on ``G``.
``log_factorial_constant`` returns the missing piece for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .measures import DiscreteMeasure, DomainError

ZERO_GRID_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class CountSample:
    """One subject's cell counts with per-cell read depths.

    ``bound`` may be left as ``None`` while the analysis bound is still
    undecided (see :func:`poismix.io.select_bound`); fitting requires it.
    """

    counts: np.ndarray
    read_depths: np.ndarray
    bound: float | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        depths = np.asarray(self.read_depths, dtype=float).ravel()
        if counts.size == 0:
            raise DomainError("a count sample needs at least one cell")
        if counts.dtype.kind == "f":
            if np.any(counts != np.round(counts)):
                raise DomainError("counts must be integers")
        counts = counts.astype(np.int64).ravel()
        if counts.shape != depths.shape:
            raise DomainError("counts and read depths differ in length")
        if np.any(counts < 0):
            raise DomainError("counts must be nonnegative")
        if not np.all(depths > 0) or not np.all(np.isfinite(depths)):
            raise DomainError("read depths must be positive and finite")
        if self.bound is not None and not (np.isfinite(self.bound) and self.bound > 0):
            raise DomainError("bound must be positive and finite")
        counts.setflags(write=False)
        depths.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "read_depths", depths)

    @classmethod
    def unit_depth(cls, counts, bound: float | None = None) -> CountSample:
        counts = np.asarray(counts)
        return cls(counts, np.ones(counts.size), bound)

    @property
    def n(self) -> int:
        return int(self.counts.size)

    def with_bound(self, bound: float) -> CountSample:
        return CountSample(self.counts, self.read_depths, bound)

    def ratios(self) -> np.ndarray:
        return self.counts / self.read_depths

    def compressed(self) -> Compressed:
        pairs = np.stack([self.counts.astype(float), self.read_depths], axis=1)
        uniq, mult = np.unique(pairs, axis=0, return_counts=True)
        return Compressed(uniq[:, 0], uniq[:, 1], mult.astype(float), self.n)


@dataclass(frozen=True, eq=False)
class Compressed:
    """Distinct ``(count, depth)`` pairs with their multiplicities."""

    x: np.ndarray
    r: np.ndarray
    mult: np.ndarray
    n: int


def log_kernel(lam, x, r) -> np.ndarray:
    """``x log(lam r) - lam r`` with ``0 log 0 = 0``; broadcasts."""
    lr = np.multiply(lam, r)
    return xlogy(x, lr) - lr


def log_mixture(G: DiscreteMeasure, data: Compressed) -> np.ndarray:
    """Per-observation ``log sum_m w_m k(lambda_m; x_i, r_i)``."""
    with np.errstate(divide="ignore"):
        logw = np.log(G.weights)
    lk = log_kernel(G.support[:, None], data.x[None, :], data.r[None, :])
    return logsumexp(lk + logw[:, None], axis=0)


def _check_bound(G: DiscreteMeasure, s: CountSample):
    if s.bound is None or G.bound != s.bound:
        raise DomainError(f"measure bound {G.bound} does not match sample bound {s.bound}")


def phi(G: DiscreteMeasure, s: CountSample) -> float:
    _check_bound(G, s)
    return phi_compressed(G, s.compressed())


def phi_compressed(G: DiscreteMeasure, data: Compressed) -> float:
    lf = log_mixture(G, data)
    if np.any(lf == -np.inf):
        return -np.inf
    return float(data.mult @ lf / data.n)


def phi_prime_values(lams, log_f: np.ndarray, data: Compressed) -> np.ndarray:
    """Directional derivatives toward ``delta_lambda`` for each ``lambda`` in ``lams``."""
    lams = np.atleast_1d(np.asarray(lams, dtype=float))
    lk = log_kernel(lams[:, None], data.x[None, :], data.r[None, :])
    ratio = np.exp(np.minimum(lk - log_f[None, :], 700.0))
    return ratio @ data.mult / data.n - 1.0


def phi_prime(G: DiscreteMeasure, lam: float, s: CountSample) -> float:
    _check_bound(G, s)
    if not 0 <= lam <= G.bound:
        raise DomainError(f"lambda {lam} outside [0, {G.bound}]")
    data = s.compressed()
    log_f = log_mixture(G, data)
    if np.any(log_f == -np.inf):
        raise DomainError("phi(G) is not finite; the directional derivative is undefined")
    return float(phi_prime_values(lam, log_f, data)[0])


def search_grid(bound: float, grid_size: int, any_positive: bool) -> np.ndarray:
    """Uniform grid on [0, B]; 0 becomes ``B * 1e-9`` when any count is positive."""
    if grid_size < 2:
        raise DomainError("grid_size must be at least 2")
    grid = np.linspace(0.0, bound, grid_size)
    if any_positive:
        grid[0] = bound * ZERO_GRID_RTOL
    return grid


def phi_prime_grid(G: DiscreteMeasure, s: CountSample, grid_size: int
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the directional derivative on a uniform grid over [0, B]."""
    _check_bound(G, s)
    data = s.compressed()
    log_f = log_mixture(G, data)
    if np.any(log_f == -np.inf):
        raise DomainError("phi(G) is not finite; the directional derivative is undefined")
    grid = search_grid(G.bound, grid_size, bool(np.any(s.counts > 0)))
    return grid, phi_prime_values(grid, log_f, data)


def log_factorial_constant(s: CountSample) -> float:
    """``-mean_i log x_i!``.

    ``phi + log_factorial_constant`` is the mean Poisson-mixture
    log-likelihood ``mean_i log sum_m w_m Pois(x_i; lambda_m r_i)``.
    """
    return float(-gammaln(s.counts + 1.0).mean())
