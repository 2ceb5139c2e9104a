"""Simulation designs, truncated-Gamma population models, and power studies.

Each subject's mixing distribution is ``Gamma(shape + jitter, rate)`` with
draws above ``bound`` set to ``bound``, where ``jitter ~ U(-1, 1)`` is drawn
once per subject. A round draws every subject, simulates its cells, fits
one NPMLE per subject, and runs both the mixing-distribution and the
Poisson-smoothed permutation tests.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .anova import StudyLayout, distance_matrix, permutation_test
from .likelihood import CountSample
from .measures import DiscreteMeasure, poisson_smooth, w1_measures, w1_pmfs
from .solvers import SolverConfig, fit

log = logging.getLogger(__name__)

SIM_TAIL_TOL = 1e-8
MAX_FAILED_FRACTION = 0.01

# cells per subject in the unbalanced design: group 1 (10 subjects), group 2 (13)
DESIGN_C_CELLS = (
    (388, 1142, 162, 391, 215, 278, 284, 193, 542, 106),
    (202, 759, 415, 69, 327, 431, 414, 451, 275, 733, 422, 65, 362),
)

READ_DEPTH_RULES = ("all-ones", "shared-uniform", "iid-uniform")


@dataclass(frozen=True)
class DesignSpec:
    kind: str
    n_k: tuple[int, ...]
    n_cells: tuple[tuple[int, ...], ...]
    read_depth_rule: str

    def __post_init__(self):
        if self.kind not in ("A", "B", "C"):
            raise ValueError(f"unknown design {self.kind!r}; valid designs are A, B, C")
        if self.read_depth_rule not in READ_DEPTH_RULES:
            raise ValueError(f"unknown read-depth rule {self.read_depth_rule!r}")
        if len(self.n_cells) != len(self.n_k) or any(
                len(c) != k for c, k in zip(self.n_cells, self.n_k)):
            raise ValueError("n_cells must list one cell count per subject")
        expected = {"A": "all-ones", "B": "shared-uniform", "C": "iid-uniform"}[self.kind]
        if self.read_depth_rule != expected:
            raise ValueError(f"design {self.kind} requires read depths {expected!r}")
        if self.kind == "B" and len({c for g in self.n_cells for c in g}) != 1:
            raise ValueError("design B needs the same number of cells for every subject")

    @classmethod
    def make(cls, kind: str, n_cells: int = 50, n_k: tuple[int, ...] = (10, 10)) -> DesignSpec:
        if kind == "C":
            return cls("C", tuple(len(g) for g in DESIGN_C_CELLS), DESIGN_C_CELLS, "iid-uniform")
        rule = {"A": "all-ones", "B": "shared-uniform"}.get(kind)
        if rule is None:
            raise ValueError(f"unknown design {kind!r}; valid designs are A, B, C")
        return cls(kind, tuple(n_k), tuple((n_cells,) * k for k in n_k), rule)

    @property
    def layout(self) -> StudyLayout:
        return StudyLayout.from_sizes(self.n_k)


@dataclass(frozen=True)
class ModelSpec:
    """Truncated-Gamma generator for one group's subject-level mixing distributions."""

    shape_base: float
    rate: float
    bound: float
    jitter: float = 1.0

    def __post_init__(self):
        if self.shape_base - self.jitter <= 0 or self.rate <= 0 or self.bound <= 0:
            raise ValueError("need shape_base > jitter, rate > 0 and bound > 0")


def _gam(a, b, bound):
    return ModelSpec(a, b, bound)


# group-1 and group-2 generators of the population models
MODELS: dict[str, tuple[ModelSpec, ModelSpec]] = {
    "1a": (_gam(14, 7 / 4, 50), _gam(14, 7 / 4, 50)),
    "1b": (_gam(14, 7, 50), _gam(14, 7, 50)),
    "1c": (_gam(6, 1, 50), _gam(6, 1, 50)),
    "2a": (_gam(14, 7 / 4, 50), _gam(6, 3 / 4, 50)),
    "2b": (_gam(14, 7 / 3, 50), _gam(6, 1, 50)),
    "2c": (_gam(14, 7 / 2, 50), _gam(6, 3 / 2, 50)),
    "3a": (_gam(4, 1, 20), _gam(5, 1, 20)),
    "3b": (_gam(5, 1, 20), _gam(6, 1, 20)),
    "3c": (_gam(6, 1, 20), _gam(7, 1, 20)),
    "4a": (_gam(11, 1, 50), _gam(12, 1, 50)),
    "4b": (_gam(12, 1, 50), _gam(13, 1, 50)),
    "4c": (_gam(13, 1, 50), _gam(14, 1, 50)),
}


def get_model(model_id: str) -> tuple[ModelSpec, ModelSpec]:
    try:
        return MODELS[model_id]
    except KeyError:
        raise ValueError(f"unknown model {model_id!r}; valid models are "
                         f"{', '.join(MODELS)}") from None


@dataclass(frozen=True)
class SubjectMixing:
    """One subject's realized mixing distribution: ``Gamma(shape, rate)`` clamped at ``bound``."""

    shape: float
    rate: float
    bound: float

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.minimum(rng.gamma(self.shape, 1.0 / self.rate, size), self.bound)

    def mean(self) -> float:
        # E min(L, B) = (a/b) P(Gamma(a+1) <= Bb) + B P(Gamma(a) > Bb)
        a, b, B = self.shape, self.rate, self.bound
        return float(a / b * stats.gamma.cdf(B * b, a + 1) + B * stats.gamma.sf(B * b, a))

    def discretize(self, n_atoms: int = 512) -> DiscreteMeasure:
        """Equal-weight atoms at the mid-quantiles ``(i + 1/2) / n_atoms``."""
        u = (np.arange(n_atoms) + 0.5) / n_atoms
        q = np.minimum(stats.gamma.ppf(u, self.shape, scale=1.0 / self.rate), self.bound)
        return DiscreteMeasure.from_atoms(q, np.full(n_atoms, 1.0 / n_atoms), self.bound)


def draw_subject_mixing(m: ModelSpec, rng: np.random.Generator) -> SubjectMixing:
    delta = rng.uniform(-m.jitter, m.jitter) if m.jitter else 0.0
    return SubjectMixing(m.shape_base + delta, m.rate, m.bound)


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: list[CountSample]
    layout: StudyLayout
    mixings: list[SubjectMixing]


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def generate_dataset(d: DesignSpec, m0: ModelSpec, m1: ModelSpec, seed,
                     bound: float | None = None) -> Dataset:
    """Simulate one study. ``seed`` is an int, a sequence of ints, or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    models = (m0, m1)
    if len(d.n_k) != 2:
        raise ValueError("simulation designs have exactly two groups")
    B = bound if bound is not None else max(m0.bound, m1.bound)
    shared = None
    if d.read_depth_rule == "shared-uniform":
        shared = rng.uniform(0.5, 1.5, d.n_cells[0][0])
    samples, mixings = [], []
    for k, sizes in enumerate(d.n_cells):
        for N in sizes:
            mix = draw_subject_mixing(models[k], rng)
            lam = mix.sample(rng, N)
            if d.read_depth_rule == "all-ones":
                r = np.ones(N)
            elif d.read_depth_rule == "shared-uniform":
                r = shared
            else:
                r = rng.uniform(0.5, 1.5, N)
            samples.append(CountSample(rng.poisson(r * lam), r, B))
            mixings.append(mix)
    return Dataset(samples, d.layout, mixings)


# -- power studies ----------------------------------------------------------------


@dataclass
class SimReport:
    rejection_rate_mixing: float
    rejection_rate_smoothed: float
    rounds: int
    n_perm: int
    seed: int
    wall_time: float = field(default=0.0, compare=False)
    alpha: float = 0.05
    design: str = ""
    model: str = ""
    n_cells: int | None = None
    failed_rounds: int = 0
    valid: bool = True
    converged_fraction: float = 1.0

    def to_json(self) -> str:
        # wall time is left out so output is byte-stable for a fixed seed
        payload = {k: v for k, v in asdict(self).items() if k != "wall_time"}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    CSV_FIELDS = ("design", "model", "n_cells", "rounds", "n_perm", "alpha", "seed",
                  "rejection_rate_mixing", "rejection_rate_smoothed", "failed_rounds",
                  "valid", "converged_fraction")

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


@dataclass(frozen=True)
class _RoundJob:
    design: DesignSpec
    m0: ModelSpec
    m1: ModelSpec
    n_perm: int
    alpha: float
    seed: int
    index: int
    solver: SolverConfig


def fit_subjects(samples, cfg: SolverConfig):
    return [fit(s, cfg) for s in samples]


def run_round(job: _RoundJob) -> tuple[bool, bool, float]:
    """One simulated study; returns (mixing rejects, smoothed rejects, converged fraction)."""
    data = generate_dataset(job.design, job.m0, job.m1, _rng(job.seed, job.index, 0))
    fits = fit_subjects(data.samples, job.solver)
    G = [f.estimate for f in fits]
    perm_seed = int(np.random.SeedSequence([job.seed, job.index, 1]).generate_state(1)[0])
    out = []
    for smoothed in (False, True):
        dm = distance_matrix(G, smoothed=smoothed, tail_tol=SIM_TAIL_TOL)
        res = permutation_test(dm, data.layout, job.n_perm, perm_seed, (job.alpha,))
        out.append(res.reject_at[float(job.alpha)])
    conv = float(np.mean([f.converged for f in fits]))
    return out[0], out[1], conv


def _safe_round(job: _RoundJob):
    try:
        return run_round(job)
    except Exception as exc:  # a failed round is data, not a crash
        log.warning("round %d failed: %s", job.index, exc)
        return None


def run_power_study(d: DesignSpec, m0: ModelSpec, m1: ModelSpec, rounds: int,
                    n_perm: int, alpha: float = 0.05, seed: int = 0,
                    solver: SolverConfig | None = None, threads: int = 1,
                    design_id: str = "", model_id: str = "") -> SimReport:
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    if n_perm < 1:
        raise ValueError("n_perm must be at least 1")
    solver = solver or SolverConfig(algorithm="VEM", stop_tol=0.01)
    jobs = [_RoundJob(d, m0, m1, n_perm, alpha, seed, i, solver) for i in range(rounds)]
    t0 = time.perf_counter()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_safe_round, jobs, chunksize=max(1, rounds // (4 * threads))))
    else:
        results = [_safe_round(j) for j in jobs]
    wall = time.perf_counter() - t0

    ok = [r for r in results if r is not None]
    failed = rounds - len(ok)
    if failed:
        log.warning("%d of %d rounds failed and were excluded", failed, rounds)
    n_ok = max(len(ok), 1)
    return SimReport(
        rejection_rate_mixing=sum(r[0] for r in ok) / n_ok,
        rejection_rate_smoothed=sum(r[1] for r in ok) / n_ok,
        rounds=rounds, n_perm=n_perm, seed=seed, wall_time=wall, alpha=alpha,
        design=design_id or d.kind, model=model_id,
        n_cells=d.n_cells[0][0] if d.kind != "C" else None,
        failed_rounds=failed, valid=failed <= MAX_FAILED_FRACTION * rounds and bool(ok),
        converged_fraction=float(np.mean([r[2] for r in ok])) if ok else 0.0,
    )


# -- signal strengths ---------------------------------------------------------------


@dataclass(frozen=True)
class SignalStrength:
    D: float
    D_h: float
    se_D: float
    se_D_h: float
    mc_reps: int


def signal_strength(m0: ModelSpec, m1: ModelSpec, mc_reps: int = 2000, seed: int = 0,
                    n_atoms: int = 512) -> SignalStrength:
    """Monte Carlo estimates of the between-minus-within mean squared W1.

    Each replicate draws two subjects per group and compares the mean of
    the four between-group pairs against the two within-group pairs, both
    for the mixing distributions (``D``) and their Poisson smoothings
    (``D_h``). Subject distributions are discretized at ``n_atoms``
    mid-quantiles.
    """
    if mc_reps < 100:
        raise ValueError("mc_reps must be at least 100")
    rng = np.random.default_rng(seed)
    diffs = np.empty((mc_reps, 2))
    for t in range(mc_reps):
        a = [draw_subject_mixing(m0, rng).discretize(n_atoms) for _ in range(2)]
        b = [draw_subject_mixing(m1, rng).discretize(n_atoms) for _ in range(2)]
        ha = [poisson_smooth(G, SIM_TAIL_TOL) for G in a]
        hb = [poisson_smooth(G, SIM_TAIL_TOL) for G in b]
        for col, (dist, x, y) in enumerate(((w1_measures, a, b), (w1_pmfs, ha, hb))):
            # all four between pairs share the expectation of the single pair
            between = np.mean([dist(u, v) ** 2 for u in x for v in y])
            within = (dist(x[0], x[1]) ** 2 + dist(y[0], y[1]) ** 2) / 2
            diffs[t, col] = between - within
    mean = diffs.mean(axis=0)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(mc_reps)
    return SignalStrength(float(mean[0]), float(mean[1]), float(se[0]), float(se[1]), mc_reps)

