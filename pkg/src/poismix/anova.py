"""Pseudo-F statistics on squared-W1 distance matrices and their permutation tests.

Two statistics are provided:

* :func:`pseudo_f` -- the one-way ANOVA ratio ``(SS_T - SS_W) / SS_W`` built
  from squared distances; on point masses it is exactly SSB/SSW.
* :func:`covariate_pseudo_f` -- a trace ratio on the Gower-centered Gram
  matrix that projects on the covariate design, tested by permuting only the
  diagnosis column.

p-values use the add-one Monte Carlo convention
``(1 + #{F_perm >= F}) / (1 + n_perm)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .eigen import sym_eigen
from .measures import (
    DEFAULT_TAIL_TOL,
    DiscreteMeasure,
    DomainError,
    poisson_smooth,
    w1_measures,
    w1_pmfs,
)

log = logging.getLogger(__name__)

NEG_EIGEN_TOL = 1e-10
# relative slack when comparing permuted and observed statistics
TIE_RTOL = 1e-12


class DegenerateStatisticError(ArithmeticError):
    """The within-group (or residual) sum of squares is zero."""


class DesignError(ValueError):
    """The covariate design matrix is rank deficient or malformed."""


@dataclass(frozen=True, eq=False)
class StudyLayout:
    """Group label (``0..K-1``) of every subject, in subject order."""

    group_of: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.group_of, dtype=np.int64).ravel()
        if g.size == 0 or g.min() < 0:
            raise DesignError("group labels must be nonnegative integers")
        counts = np.bincount(g)
        if counts.size < 2 or np.any(counts == 0):
            raise DesignError("need at least two groups, each nonempty, labelled 0..K-1")
        g.setflags(write=False)
        object.__setattr__(self, "group_of", g)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> StudyLayout:
        return cls(np.repeat(np.arange(len(sizes)), sizes))

    @property
    def K(self) -> int:
        return int(self.group_of.max()) + 1

    @property
    def n_k(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.K)

    @property
    def n(self) -> int:
        return int(self.group_of.size)


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """Squared W1 distances between subjects."""

    values: np.ndarray

    def __post_init__(self):
        d = np.array(self.values, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise DomainError("distance matrix must be square")
        if np.abs(d - d.T).max(initial=0.0) > 1e-12 * max(1.0, np.abs(d).max(initial=0.0)):
            raise DomainError("distance matrix must be symmetric")
        if np.any(d < 0) or np.any(np.diag(d) != 0):
            raise DomainError("distances must be nonnegative with a zero diagonal")
        d = (d + d.T) / 2.0
        d.setflags(write=False)
        object.__setattr__(self, "values", d)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class TestResult:
    statistic: float
    p_value: float
    n_permutations: int
    reject_at: dict[float, bool]
    seed: int | None
    degenerate: bool = False
    exceedances: int = 0

    __test__ = False  # not a pytest class


@dataclass(frozen=True, eq=False)
class CovariateMatrix:
    """Numeric ``n x p`` design matrix; one column holds the diagnosis."""

    values: np.ndarray
    names: tuple[str, ...] = field(default=())
    diagnosis_col: int = 0

    def __post_init__(self):
        z = np.array(self.values, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2 or not np.all(np.isfinite(z)):
            raise DesignError("design matrix must be a finite 2-D array")
        names = tuple(self.names) or tuple(f"z{j}" for j in range(z.shape[1]))
        if len(names) != z.shape[1]:
            raise DesignError("one name per design column is required")
        if not 0 <= self.diagnosis_col < z.shape[1]:
            raise DesignError(f"diagnosis column {self.diagnosis_col} out of range")
        z.setflags(write=False)
        object.__setattr__(self, "values", z)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]


# -- distances -------------------------------------------------------------


def distance_matrix(fits: Sequence[DiscreteMeasure], smoothed: bool = False,
                    tail_tol: float = DEFAULT_TAIL_TOL) -> DistanceMatrix:
    """Pairwise squared W1 between fitted mixing measures or their Poisson smoothings."""
    bounds = {G.bound for G in fits}
    if len(bounds) > 1:
        raise DomainError(f"measures have different bounds: {sorted(bounds)}")
    n = len(fits)
    d = np.zeros((n, n))
    if smoothed:
        pmfs = [poisson_smooth(G, tail_tol) for G in fits]
        dist = lambda i, j: w1_pmfs(pmfs[i], pmfs[j])  # noqa: E731
    else:
        dist = lambda i, j: w1_measures(fits[i], fits[j])  # noqa: E731
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = dist(i, j) ** 2
    return DistanceMatrix(d)


# -- plain pseudo-F ----------------------------------------------------------


def _within(d: np.ndarray, labels: np.ndarray, n_k: np.ndarray) -> np.ndarray:
    """``sum_k (1/n_k) sum_{i,j in k} d_ij`` for each row of ``labels``."""
    K = n_k.size
    onehot = (labels[..., None] == np.arange(K)).astype(float)  # (P, n, K)
    block = np.einsum("pik,ij,pjk->pk", onehot, d, onehot)
    return block @ (1.0 / n_k)


def pseudo_f(d: DistanceMatrix, layout: StudyLayout) -> float:
    if d.n != layout.n:
        raise DomainError(f"distance matrix has {d.n} subjects, layout has {layout.n}")
    total = d.values.sum() / layout.n
    within = float(_within(d.values, layout.group_of[None, :], layout.n_k)[0])
    if within <= 0.0:
        raise DegenerateStatisticError("within-group sum of squares is zero")
    return (total - within) / within


def _p_value(observed: float, permuted: np.ndarray) -> tuple[float, int]:
    slack = TIE_RTOL * max(1.0, abs(observed))
    hits = int(np.count_nonzero(~(permuted < observed - slack)))  # NaN counts as a hit
    return (1.0 + hits) / (1.0 + permuted.size), hits


def _decisions(p: float, alphas: Sequence[float]) -> dict[float, bool]:
    return {float(a): bool(p <= a) for a in alphas}


def permutation_test(d: DistanceMatrix, layout: StudyLayout, n_perm: int, seed: int,
                     alphas: Sequence[float] = (0.05,), permutations=None,
                     chunk: int = 512) -> TestResult:
    """Fisher-Pitman permutation test of the pseudo-F statistic.

    ``permutations`` (an ``n_perm x n`` array of subject orderings) bypasses
    the random draw; otherwise orderings are drawn uniformly from ``seed``.
    """
    if n_perm < 1:
        raise DomainError("n_perm must be at least 1")
    try:
        F = pseudo_f(d, layout)
    except DegenerateStatisticError:
        return TestResult(float("nan"), 1.0, n_perm, _decisions(1.0, alphas), seed,
                          degenerate=True)

    n, g, n_k = layout.n, layout.group_of, layout.n_k
    total = d.values.sum() / n
    if permutations is None:
        rng = np.random.default_rng(seed)
    else:
        permutations = np.asarray(permutations, dtype=np.int64).reshape(n_perm, n)
    stats = np.empty(n_perm)
    for start in range(0, n_perm, chunk):
        size = min(chunk, n_perm - start)
        if permutations is None:
            orders = rng.permuted(np.tile(np.arange(n), (size, 1)), axis=1)
        else:
            orders = permutations[start:start + size]
        # subject orders[p, i] takes the i-th label slot
        labels = np.empty_like(orders)
        np.put_along_axis(labels, orders, np.broadcast_to(g, orders.shape), axis=1)
        within = _within(d.values, labels, n_k)
        with np.errstate(divide="ignore", invalid="ignore"):
            stats[start:start + size] = (total - within) / within
    p, hits = _p_value(F, stats)
    return TestResult(F, p, n_perm, _decisions(p, alphas), seed, exceedances=hits)


# -- covariate-adjusted pseudo-F -----------------------------------------------


def gower_center(d: DistanceMatrix) -> np.ndarray:
    """Double-centered ``-D/2`` with negative eigenvalues clipped to zero."""
    n = d.n
    J = np.eye(n) - np.full((n, n), 1.0 / n)
    G = J @ (-0.5 * d.values) @ J
    G = (G + G.T) / 2.0
    vals, vecs = sym_eigen(G)
    if vals.min(initial=0.0) < -NEG_EIGEN_TOL:
        log.warning("Gower matrix has negative eigenvalues down to %.3g; clipping to 0",
                    vals.min())
    vals = np.maximum(vals, 0.0)
    out = (vecs * vals) @ vecs.T
    return (out + out.T) / 2.0


def _column_basis(Z: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, int]:
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    rank = int(np.count_nonzero(s > tol * max(s[0], 1e-300)))
    return U[:, :rank], rank


def hat_matrix(Z: np.ndarray) -> np.ndarray:
    Q, rank = _column_basis(np.asarray(Z, dtype=float))
    if rank < Z.shape[1]:
        raise DesignError(f"design matrix has rank {rank} < {Z.shape[1]} columns")
    return Q @ Q.T


def _trace_ratio(G: np.ndarray, Q: np.ndarray, trace_G: float) -> float:
    num = float(np.einsum("ij,ik,kj->", Q, G, Q))
    den = trace_G - num
    if den <= 1e-12 * max(abs(trace_G), 1e-300) or trace_G <= 0.0:
        raise DegenerateStatisticError("residual trace is zero")
    return num / den


def pseudo_f_from_gram(G, Z) -> float:
    """``tr(H G H) / tr((I - H) G (I - H))`` for the projector ``H`` onto ``col(Z)``."""
    G = np.asarray(G, dtype=float)
    Z = Z.values if isinstance(Z, CovariateMatrix) else np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if G.shape != (Z.shape[0], Z.shape[0]):
        raise DomainError("Gram matrix and design have different numbers of subjects")
    Q, rank = _column_basis(Z)
    if rank < Z.shape[1]:
        raise DesignError(f"design matrix has rank {rank} < {Z.shape[1]} columns")
    return _trace_ratio(G, Q, float(np.trace(G)))


def covariate_pseudo_f(d: DistanceMatrix, Z: CovariateMatrix) -> float:
    if Z.n != d.n:
        raise DomainError(f"design has {Z.n} rows, distance matrix has {d.n}")
    return pseudo_f_from_gram(gower_center(d), Z)


def covariate_permutation_test(d: DistanceMatrix, Z: CovariateMatrix,
                               diagnosis_col: int | None = None, n_perm: int = 1000,
                               seed: int = 0, alphas: Sequence[float] = (0.05,)
                               ) -> TestResult:
    """Permute the diagnosis column only, keeping the other covariates fixed."""
    if n_perm < 1:
        raise DomainError("n_perm must be at least 1")
    col = Z.diagnosis_col if diagnosis_col is None else diagnosis_col
    if not 0 <= col < Z.values.shape[1]:
        raise DesignError(f"diagnosis column {col} out of range")
    if Z.n != d.n:
        raise DomainError(f"design has {Z.n} rows, distance matrix has {d.n}")
    G = gower_center(d)
    trace_G = float(np.trace(G))
    try:
        F = pseudo_f_from_gram(G, Z)
    except DegenerateStatisticError:
        return TestResult(float("nan"), 1.0, n_perm, _decisions(1.0, alphas), seed,
                          degenerate=True)

    rng = np.random.default_rng(seed)
    Zp = np.array(Z.values)
    diag = Z.values[:, col]
    stats = np.empty(n_perm)
    for b in range(n_perm):
        Zp[:, col] = rng.permutation(diag)
        Q, _ = _column_basis(Zp)
        try:
            stats[b] = _trace_ratio(G, Q, trace_G)
        except DegenerateStatisticError:
            stats[b] = np.inf
    p, hits = _p_value(F, stats)
    return TestResult(F, p, n_perm, _decisions(p, alphas), seed, exceedances=hits)


# -- multiple testing ------------------------------------------------------------


def benjamini_hochberg(p_values, q: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Step-up FDR control; returns ``(rejected, adjusted)`` in input order."""
    p = np.asarray(p_values, dtype=float)
    if not 0 < q < 1:
        raise DomainError("q must lie in (0, 1)")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise DomainError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return np.zeros(0, dtype=bool), np.zeros(0)
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum(np.minimum.accumulate(ranked[::-1])[::-1], 1.0)
    adjusted = np.empty(m)
    adjusted[order] = adj_sorted
    passing = np.flatnonzero(p[order] <= q * np.arange(1, m + 1) / m)
    rejected = np.zeros(m, dtype=bool)
    if passing.size:
        rejected[order[: passing[-1] + 1]] = True
    return rejected, adjusted
