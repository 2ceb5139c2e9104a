"""NPMLE of a Poisson mixing distribution on [0, B] with known read depths.

Three vertex-type algorithms share one skeleton: start from a point mass
at the method-of-moments intensity, search the directional derivative on
a grid for the steepest vertex, stop once no vertex improves the
likelihood by more than ``stop_tol``, otherwise move:

* VDM  mixes the steepest vertex into the current iterate;
* VEM  moves the mass of the worst current atom onto the steepest vertex;
* ISDM reweights the current iterate against every local maximum of the
  directional derivative at once.

All line searches are golden-section searches over a concave 1-D
restriction of the log-likelihood, so every step is monotone.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import xlogy

from .likelihood import (
    Compressed,
    CountSample,
    log_kernel,
    log_mixture,
    phi_prime_values,
    search_grid,
)
from .measures import DiscreteMeasure, DomainError, point_mass

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
_EXP_CAP = 700.0
_MAX_POLISH = 50


class Algorithm(str, Enum):
    VDM = "VDM"
    VEM = "VEM"
    ISDM = "ISDM"


@dataclass(frozen=True)
class SolverConfig:
    algorithm: Algorithm = Algorithm.VEM
    stop_tol: float = 0.01
    max_iters: int = 2000
    grid_size: int = 1000
    refine: bool = True
    weight_floor: float = 1e-12
    line_tol: float = 1e-8
    isdm_inner_tol: float = 1e-10
    isdm_inner_iters: int = 500
    consolidate: bool = True
    cluster_gap: float = 0.01  # relative to B

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if not self.stop_tol > 0:
            raise DomainError("stop_tol must be positive")
        if self.grid_size < 10:
            raise DomainError("grid_size must be at least 10")
        if self.max_iters < 1:
            raise DomainError("max_iters must be positive")


@dataclass(frozen=True, eq=False)
class FitResult:
    estimate: DiscreteMeasure
    phi_trace: list[float] = field(repr=False)
    iterations: int
    converged: bool
    max_phi_prime_at_exit: float

    @property
    def phi(self) -> float:
        return self.phi_trace[-1]


def golden_section_max(f, a: float, b: float, tol: float) -> tuple[float, float]:
    """Maximize a unimodal ``f`` on ``[a, b]``; returns ``(argmax, max)``.

    The endpoints are evaluated too, so a maximum sitting on the boundary
    is returned exactly.
    """
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    best = max(((c, fc), (d, fd)), key=lambda t: t[1])
    for x in (a, b):
        fx = f(x)
        if fx > best[1]:
            best = (x, fx)
    return best


class _Problem:
    """Per-sample state shared across iterations: data, grid, cached kernels."""

    def __init__(self, s: CountSample, cfg: SolverConfig):
        if s.bound is None:
            raise DomainError("the count sample has no bound; set one before fitting")
        self.cfg = cfg
        self.bound = float(s.bound)
        self.data: Compressed = s.compressed()
        self.grid = search_grid(self.bound, cfg.grid_size, bool(np.any(s.counts > 0)))
        lk = log_kernel(self.grid[:, None], self.data.x[None, :], self.data.r[None, :])
        self._shift = lk.max(axis=0)
        self._scaled = np.exp(lk - self._shift)

    # -- log-likelihood pieces -------------------------------------------

    def log_f(self, G: DiscreteMeasure) -> np.ndarray:
        return log_mixture(G, self.data)

    def phi(self, log_f: np.ndarray) -> float:
        if np.any(log_f == -np.inf):
            return -np.inf
        return float(self.data.mult @ log_f / self.data.n)

    def log_k(self, lam: float) -> np.ndarray:
        return log_kernel(lam, self.data.x, self.data.r)

    def dphi(self, lams, log_f: np.ndarray) -> np.ndarray:
        return phi_prime_values(lams, log_f, self.data)

    def dphi_grid(self, log_f: np.ndarray) -> np.ndarray:
        gap = self._shift - log_f
        if gap.max() < _EXP_CAP:
            v = self.data.mult * np.exp(gap) / self.data.n
            return self._scaled @ v - 1.0
        return self.dphi(self.grid, log_f)

    # -- vertex search -----------------------------------------------------

    def refine(self, j: int, log_f: np.ndarray, value: float) -> tuple[float, float]:
        g = self.grid
        if not self.cfg.refine:
            return float(g[j]), float(value)
        lo, hi = g[max(j - 1, 0)], g[min(j + 1, g.size - 1)]
        d = self.data
        w = d.mult / d.n

        def f(t):
            lk = xlogy(d.x, t * d.r) - t * d.r
            return float(np.exp(np.minimum(lk - log_f, _EXP_CAP)) @ w) - 1.0

        lam, val = golden_section_max(f, lo, hi, 1e-7 * self.bound)
        if val >= value:
            return float(lam), float(val)
        return float(g[j]), float(value)

    def steepest(self, log_f: np.ndarray) -> tuple[float, float, np.ndarray]:
        vals = self.dphi_grid(log_f)
        j = int(np.argmax(vals))  # first index on ties: smallest lambda
        lam, val = self.refine(j, log_f, vals[j])
        return lam, val, vals

    def local_maxima(self, vals: np.ndarray, log_f: np.ndarray) -> list[tuple[float, float]]:
        inner = np.flatnonzero((vals[1:-1] > vals[:-2]) & (vals[1:-1] > vals[2:])) + 1
        idx = list(inner)
        if vals[0] > vals[1]:
            idx.insert(0, 0)
        if vals[-1] > vals[-2]:
            idx.append(vals.size - 1)
        return [self.refine(j, log_f, vals[j]) for j in idx]


# -- single steps ---------------------------------------------------------


def _vdm_move(prob: _Problem, G: DiscreteMeasure, log_f: np.ndarray, lam_max: float
              ) -> tuple[DiscreteMeasure, float]:
    mult, n = prob.data.mult, prob.data.n
    a = np.exp(np.minimum(prob.log_k(lam_max) - log_f, _EXP_CAP))

    def gain(alpha):
        return float(mult @ np.log((1.0 - alpha) + alpha * a) / n)

    with np.errstate(divide="ignore"):
        alpha, best = golden_section_max(gain, 0.0, 1.0, prob.cfg.line_tol)
    if best <= 0.0 or alpha <= 0.0:
        return G, 0.0
    new = G.mix(point_mass(lam_max, G.bound), alpha, prob.cfg.weight_floor)
    return new, best


def step_vdm(prob: _Problem, G: DiscreteMeasure, log_f: np.ndarray, lam_max: float
             ) -> DiscreteMeasure:
    return _vdm_move(prob, G, log_f, lam_max)[0]


def step_vem(prob: _Problem, G: DiscreteMeasure, log_f: np.ndarray, lam_max: float
             ) -> DiscreteMeasure:
    mult, n = prob.data.mult, prob.data.n
    at_support = prob.dphi(G.support, log_f)
    m = int(np.argmin(at_support))
    lam_min, w_min = float(G.support[m]), float(G.weights[m])
    if abs(lam_min - lam_max) <= 1e-9 * G.bound:
        return G
    a = np.exp(np.minimum(prob.log_k(lam_max) - log_f, _EXP_CAP))
    b = np.exp(np.minimum(prob.log_k(lam_min) - log_f, _EXP_CAP))
    diff = w_min * (a - b)

    def gain(alpha):
        return float(mult @ np.log(np.maximum(1.0 + alpha * diff, 0.0)) / n)

    with np.errstate(divide="ignore"):
        alpha, best = golden_section_max(gain, 0.0, 1.0, prob.cfg.line_tol)
    if best <= 0.0 or alpha <= 0.0:
        return G
    moved = alpha * w_min
    support = np.append(G.support, lam_max)
    weights = np.append(G.weights, moved)
    weights[m] -= moved
    return DiscreteMeasure.from_atoms(support, np.maximum(weights, 0.0), G.bound,
                                      prob.cfg.weight_floor)


def _simplex_em(ratios: np.ndarray, mult: np.ndarray, n: int, tol: float, max_iter: int
                ) -> np.ndarray:
    """Maximize ``sum_i mult_i log(ratios_i . p)`` over the probability simplex."""
    p = np.full(ratios.shape[1], 0.5 / (ratios.shape[1] - 1))
    p[0] = 0.5
    for _ in range(max_iter):
        g = ratios @ p
        new = p * (ratios.T @ (mult / g)) / n
        new /= new.sum()
        done = np.max(np.abs(new - p)) < tol
        p = new
        if done:
            break
    return p


def step_isdm(prob: _Problem, G: DiscreteMeasure, log_f: np.ndarray, lam_max: float,
              vals: np.ndarray) -> DiscreteMeasure:
    cfg = prob.cfg
    mult, n = prob.data.mult, prob.data.n
    peaks = prob.local_maxima(vals, log_f)
    lams = sorted({lam for lam, _ in peaks} | {lam_max})
    ratios = np.column_stack(
        [np.ones_like(log_f)]
        + [np.exp(np.minimum(prob.log_k(lam) - log_f, _EXP_CAP)) for lam in lams])
    p = _simplex_em(ratios, mult, n, cfg.isdm_inner_tol, cfg.isdm_inner_iters)
    with np.errstate(divide="ignore"):
        em_gain = float(mult @ np.log(ratios @ p) / n)

    # safeguard: never do worse than the single steepest-vertex move
    vdm_G, vdm_gain = _vdm_move(prob, G, log_f, lam_max)
    if vdm_gain >= em_gain or not np.isfinite(em_gain):
        return vdm_G
    support = np.concatenate((G.support, lams))
    weights = np.concatenate((p[0] * G.weights, p[1:]))
    return DiscreteMeasure.from_atoms(support, weights, G.bound, cfg.weight_floor)


def consolidate(prob: _Problem, G: DiscreteMeasure, log_f: np.ndarray
                ) -> tuple[DiscreteMeasure, np.ndarray]:
    """Merge neighbouring atoms while the log-likelihood does not drop.

    Vertex methods approach a single optimal atom through a cluster of
    nearby atoms. Each adjacent pair closer than ``cluster_gap * B`` is
    tried as one atom carrying both weights, placed by golden section on
    the pair's span widened by the gap; a merge is kept only if it does
    not lower the log-likelihood.
    """
    cfg = prob.cfg
    mult, n = prob.data.mult, prob.data.n
    max_gap = cfg.cluster_gap * G.bound

    def ratio(lam):
        return np.exp(np.minimum(prob.log_k(lam) - log_f, _EXP_CAP))

    while G.n_atoms > 1:
        gaps = np.diff(G.support)
        merged = False
        for m in np.argsort(gaps, kind="stable"):
            if gaps[m] >= max_gap:
                break
            l1, l2 = G.support[m], G.support[m + 1]
            w1, w2 = G.weights[m], G.weights[m + 1]
            rest = 1.0 - w1 * ratio(l1) - w2 * ratio(l2)

            def gain(lam, rest=rest, w=w1 + w2):
                return float(mult @ np.log(np.maximum(rest + w * ratio(lam), 0.0)) / n)

            lo, hi = max(0.0, l1 - gaps[m]), min(G.bound, l2 + gaps[m])
            with np.errstate(divide="ignore"):
                lam, val = golden_section_max(gain, lo, hi, 1e-7 * G.bound)
            if val >= 0.0:
                support = np.append(np.delete(G.support, [m, m + 1]), lam)
                weights = np.append(np.delete(G.weights, [m, m + 1]), w1 + w2)
                cand = DiscreteMeasure.from_atoms(support, weights, G.bound, cfg.weight_floor)
                cand_log_f = prob.log_f(cand)
                if prob.phi(cand_log_f) >= prob.phi(log_f):
                    G, log_f = cand, cand_log_f
                    merged = True
                    break
        if not merged:
            break
    return G, log_f


# -- driver ---------------------------------------------------------------


def initial_point(s: CountSample) -> float:
    bound = float(s.bound)
    return float(np.clip(np.mean(s.ratios()), bound * 1e-9, bound))


def fit(s: CountSample, cfg: SolverConfig | None = None) -> FitResult:
    """Compute the NPMLE of the mixing distribution for one count sample."""
    cfg = cfg or SolverConfig()
    if s.bound is None:
        raise DomainError("the count sample has no bound; set one before fitting")
    if not np.any(s.counts > 0):
        G = point_mass(0.0, s.bound)
        return FitResult(G, [0.0], 0, True, 0.0)

    prob = _Problem(s, cfg)
    G = point_mass(initial_point(s), s.bound)
    log_f = prob.log_f(G)
    trace = [prob.phi(log_f)]
    converged = False
    dmax = np.inf
    it = 0
    polish_rounds = 0
    while True:
        lam_max, dmax, vals = prob.steepest(log_f)
        if dmax <= cfg.stop_tol:
            if cfg.consolidate and G.n_atoms > 1 and polish_rounds < _MAX_POLISH:
                polish_rounds += 1
                merged, merged_log_f = consolidate(prob, G, log_f)
                if merged.n_atoms < G.n_atoms:
                    # re-check the certificate at the consolidated iterate
                    G, log_f = merged, merged_log_f
                    trace.append(prob.phi(log_f))
                    continue
            converged = True
            break
        if it >= cfg.max_iters:
            break
        if cfg.algorithm is Algorithm.VDM:
            new = step_vdm(prob, G, log_f, lam_max)
        elif cfg.algorithm is Algorithm.VEM:
            new = step_vem(prob, G, log_f, lam_max)
        else:
            new = step_isdm(prob, G, log_f, lam_max, vals)
        it += 1
        if new is G:
            break  # no improving move at line-search resolution
        new_log_f = prob.log_f(new)
        new_phi = prob.phi(new_log_f)
        if new_phi < trace[-1]:
            # rounding in the merge/prune can cost ~1e-16; keep the better iterate
            new, new_log_f, new_phi = G, log_f, trace[-1]
        G, log_f = new, new_log_f
        trace.append(new_phi)
    return FitResult(G, trace, it, converged, float(dmax))


def support_size_check(result: FitResult, s: CountSample) -> bool | None:
    """Atoms versus distinct counts, for equal read depths; ``None`` when skipped.

    With a common read depth the NPMLE has at most as many atoms as there
    are distinct count values; a violation is reported as a warning.
    """
    if not np.all(s.read_depths == s.read_depths[0]):
        return None
    ok = result.estimate.n_atoms <= np.unique(s.counts).size
    if not ok:
        warnings.warn(f"NPMLE has {result.estimate.n_atoms} atoms but only "
                      f"{np.unique(s.counts).size} distinct counts", RuntimeWarning)
    return bool(ok)
