"""Discrete mixing measures on [0, B], their Poisson smoothings, and W1.

Everything here is immutable. ``DiscreteMeasure`` normalizes on
construction (sort, merge near-duplicate atoms, prune tiny weights), so a
measure that exists is always valid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import gammaln, xlogy

DEFAULT_WEIGHT_FLOOR = 1e-12
DEFAULT_TAIL_TOL = 1e-10
MERGE_RTOL = 1e-9


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    support: np.ndarray
    weights: np.ndarray
    bound: float

    def __post_init__(self):
        support = np.asarray(self.support, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if not np.isfinite(self.bound) or self.bound <= 0:
            raise DomainError(f"bound must be positive and finite, got {self.bound}")
        if support.size == 0 or support.shape != weights.shape:
            raise DomainError("support and weights must be nonempty and of equal length")
        if np.any(support < 0) or np.any(support > self.bound):
            raise DomainError(f"support points must lie in [0, {self.bound}]")
        if np.any(np.diff(support) <= 0):
            raise DomainError("support must be strictly increasing")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-10:
            raise DomainError("weights must be nonnegative and sum to 1")
        support.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bound", float(self.bound))

    @classmethod
    def from_atoms(cls, support, weights, bound: float,
                   weight_floor: float = DEFAULT_WEIGHT_FLOOR) -> DiscreteMeasure:
        """Build a measure from unsorted, possibly duplicated, unnormalized atoms.

        Atoms closer than ``1e-9 * bound`` are merged (weights summed, location
        weighted-averaged); atoms whose normalized weight falls below
        ``weight_floor`` are dropped and the rest renormalized.
        """
        support = np.asarray(support, dtype=float).ravel()
        weights = np.asarray(weights, dtype=float).ravel()
        if support.shape != weights.shape or support.size == 0:
            raise DomainError("support and weights must be nonempty and of equal length")
        if np.any(weights < 0) or weights.sum() <= 0:
            raise DomainError("weights must be nonnegative with positive total")
        if np.any(support < -MERGE_RTOL * bound) or np.any(support > bound * (1 + MERGE_RTOL)):
            raise DomainError(f"support points must lie in [0, {bound}]")
        support = np.clip(support, 0.0, bound)
        order = np.argsort(support, kind="stable")
        support, weights = support[order], weights[order]

        # merge runs of atoms within the merge tolerance of the run start
        tol = MERGE_RTOL * bound
        starts = np.concatenate(([True], np.diff(support) > tol))
        run = np.cumsum(starts) - 1
        w = np.bincount(run, weights=weights)
        s = np.bincount(run, weights=weights * support)
        loc = np.where(w > 0, s / np.where(w > 0, w, 1.0), support[starts])
        w = w / w.sum()

        keep = w >= weight_floor
        if not keep.any():
            keep = w == w.max()
        loc, w = loc[keep], w[keep]
        return cls(np.clip(loc, 0.0, bound), w / w.sum(), bound)

    @property
    def n_atoms(self) -> int:
        return int(self.support.size)

    def mean(self) -> float:
        return float(self.support @ self.weights)

    def mix(self, other: DiscreteMeasure, t: float,
            weight_floor: float = DEFAULT_WEIGHT_FLOOR) -> DiscreteMeasure:
        """Return ``(1 - t) * self + t * other``."""
        if other.bound != self.bound:
            raise DomainError("cannot mix measures with different bounds")
        return DiscreteMeasure.from_atoms(
            np.concatenate((self.support, other.support)),
            np.concatenate(((1 - t) * self.weights, t * other.weights)),
            self.bound, weight_floor)

    def cdf(self, x) -> np.ndarray:
        cum = np.cumsum(self.weights)
        idx = np.searchsorted(self.support, np.asarray(x, dtype=float), side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)


@dataclass(frozen=True, eq=False)
class TruncatedPMF:
    masses: np.ndarray
    tail_mass: float
    tail_tol: float = field(default=DEFAULT_TAIL_TOL)

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=float).ravel()
        if masses.size == 0 or np.any(masses < 0):
            raise DomainError("masses must be nonempty and nonnegative")
        if self.tail_mass < 0 or self.tail_mass > self.tail_tol:
            raise DomainError(f"tail mass {self.tail_mass} exceeds tolerance {self.tail_tol}")
        if abs(masses.sum() + self.tail_mass - 1.0) > 1e-10:
            raise DomainError("masses plus tail must sum to 1")
        masses.setflags(write=False)
        object.__setattr__(self, "masses", masses)

    @property
    def x_max(self) -> int:
        return self.masses.size - 1

    def mean(self) -> float:
        """Mean of the retained masses (a lower bound on the untruncated mean)."""
        return float(np.arange(self.masses.size) @ self.masses)

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.masses)


def point_mass(lam: float, bound: float) -> DiscreteMeasure:
    if not 0 <= lam <= bound:
        raise DomainError(f"point mass location {lam} outside [0, {bound}]")
    return DiscreteMeasure(np.array([float(lam)]), np.array([1.0]), bound)


def _poisson_upper_guess(lam_max: float, tail_tol: float) -> int:
    # Chernoff-style head room; extended below if still short
    z = np.sqrt(2 * np.log(1 / tail_tol))
    return int(np.ceil(lam_max + z * np.sqrt(lam_max + 1) + z * z + 10))


def _poisson_pmf_matrix(x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logp = xlogy(x[:, None], lam[None, :]) - lam[None, :] - gammaln(x[:, None] + 1.0)
    return np.exp(logp)


def poisson_smooth(G: DiscreteMeasure, tail_tol: float = DEFAULT_TAIL_TOL) -> TruncatedPMF:
    """Poisson-smoothed mixture PMF ``x -> sum_m w_m Pois(x; lambda_m)``, truncated.

    ``x_max`` is the smallest integer whose upper tail mass is at most
    ``tail_tol``.
    """
    if not 0 < tail_tol < 1:
        raise DomainError("tail_tol must lie in (0, 1)")
    lam, w = G.support, G.weights
    upper = _poisson_upper_guess(float(lam.max()), tail_tol)
    while True:
        x = np.arange(upper + 1)
        pmf = _poisson_pmf_matrix(x, lam) @ w
        beyond = float(stats.poisson.sf(upper, lam) @ w)
        # tail[x] = P(X > x), accumulated from the far end to avoid cancellation
        tail = np.concatenate((np.cumsum(pmf[::-1])[::-1][1:], [0.0])) + beyond
        hit = np.flatnonzero(tail <= tail_tol)
        if hit.size:
            x_max = int(hit[0])
            break
        upper *= 2
    masses = pmf[: x_max + 1]
    tail_mass = min(max(0.0, 1.0 - masses.sum()), tail_tol)
    return TruncatedPMF(masses, tail_mass, tail_tol)


def w1_measures(G1: DiscreteMeasure, G2: DiscreteMeasure) -> float:
    """Exact W1 between two discrete measures via the CDF-difference integral."""
    pts = np.union1d(G1.support, G2.support)
    if pts.size == 1:
        return 0.0
    diff = np.abs(G1.cdf(pts[:-1]) - G2.cdf(pts[:-1]))
    return float(diff @ np.diff(pts))


def _padded_cdfs(h1: TruncatedPMF, h2: TruncatedPMF) -> tuple[np.ndarray, np.ndarray]:
    n = max(h1.masses.size, h2.masses.size)
    c1 = np.cumsum(np.pad(h1.masses, (0, n - h1.masses.size)))
    c2 = np.cumsum(np.pad(h2.masses, (0, n - h2.masses.size)))
    return c1, c2


def w1_pmfs(h1: TruncatedPMF, h2: TruncatedPMF) -> float:
    """W1 between two PMFs on the integers, summed over the common truncation range."""
    c1, c2 = _padded_cdfs(h1, h2)
    return float(np.abs(c1 - c2).sum())


def w1_pmfs_error_bound(h1: TruncatedPMF, h2: TruncatedPMF) -> float:
    """Bound on ``|w1_pmfs(h1, h2) - W1(untruncated)|``.

    Inside the retained range the CDFs are exact; each CDF undershoots its
    true value by at most its tail mass, and beyond ``x_max`` the omitted
    integrand is bounded by the summed upper tails, which for Poisson
    mixtures decay at least geometrically past the truncation point.
    """
    n = max(h1.masses.size, h2.masses.size)
    return 2.0 * (h1.tail_mass + h2.tail_mass) * max(n, 1)
