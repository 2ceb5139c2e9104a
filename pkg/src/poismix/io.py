"""Long-format count tables, covariate files, bound selection, and the test pipeline."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .anova import (
    CovariateMatrix,
    StudyLayout,
    benjamini_hochberg,
    covariate_permutation_test,
    distance_matrix,
    permutation_test,
)
from .likelihood import CountSample, log_factorial_constant
from .measures import DEFAULT_TAIL_TOL, DomainError
from .solvers import FitResult, SolverConfig, fit

log = logging.getLogger(__name__)

COLUMNS = ("gene", "subject", "group", "count", "read_depth")
DISTANCE_MODES = {"mixing": (False,), "mixture": (True,), "both": (False, True)}
RESULT_FIELDS = ("gene", "distance", "statistic", "p_value", "q_value", "rejected",
                 "converged_fraction", "B_used", "n_subjects", "error")


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LongTableRow:
    gene: str
    subject: str
    group: str
    count: int
    read_depth: float

    def __post_init__(self):
        if self.count < 0:
            raise DomainError("count must be nonnegative")
        if not self.read_depth > 0:
            raise DomainError("read_depth must be positive")


@dataclass(frozen=True)
class RunConfig:
    B: float | None = None
    b_quantile: float = 0.99
    b_factor: float = 4 / 3
    per_gene_bound: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)
    n_perm: int = 100_000
    seed: int = 0
    smoothed: str = "both"
    fdr_q: float = 0.05
    covariates_path: str | None = None
    diagnosis_col: str = "diagnosis"
    tail_tol: float = DEFAULT_TAIL_TOL
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.b_quantile < 1:
            raise ConfigError("b_quantile must lie in (0, 1)")
        if self.b_factor < 1:
            raise ConfigError("b_factor must be at least 1")
        if self.B is not None and not self.B > 0:
            raise ConfigError("B must be positive")
        if self.smoothed not in DISTANCE_MODES:
            raise ConfigError(f"smoothed must be one of {sorted(DISTANCE_MODES)}")
        if self.n_perm < 1:
            raise ConfigError("n_perm must be at least 1")
        if not 0 < self.fdr_q < 1:
            raise ConfigError("fdr_q must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class GeneData:
    subjects: tuple[str, ...]
    groups: tuple[str, ...]  # group name of every subject, aligned with ``subjects``
    layout: StudyLayout
    samples: tuple[CountSample, ...]

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.groups)))

    def all_ratios(self) -> np.ndarray:
        return np.concatenate([s.ratios() for s in self.samples])

    def with_bound(self, B: float) -> GeneData:
        return GeneData(self.subjects, self.groups, self.layout,
                        tuple(s.with_bound(B) for s in self.samples))


def select_bound(all_ratios, cfg: RunConfig) -> float:
    """Explicit ``cfg.B``, else ``b_factor`` times the ``b_quantile`` of the
    ratios rounded up to a multiple of 5 (at least 5)."""
    if cfg.B is not None:
        return float(cfg.B)
    ratios = np.asarray(all_ratios, dtype=float)
    if ratios.size == 0:
        raise DomainError("no count/read-depth ratios to choose a bound from")
    raw = cfg.b_factor * float(np.quantile(ratios, cfg.b_quantile))
    return float(max(5, 5 * math.ceil(raw / 5 - 1e-9)))


def _delimiter(path: Path, fmt: str | None) -> str:
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "tsv")
    if fmt not in ("csv", "tsv"):
        raise ParseError(f"unknown format {fmt!r}")
    return "," if fmt == "csv" else "\t"


def read_rows(path, fmt: str | None = None) -> Iterable[tuple[int, LongTableRow]]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=_delimiter(path, fmt))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise ParseError(f"{path}:1: duplicate column names in header")
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise ParseError(f"{path}:1: missing columns {missing}")
        idx = {c: header.index(c) for c in COLUMNS}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not v.strip() for v in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            raw_count, raw_depth = rec[idx["count"]].strip(), rec[idx["read_depth"]].strip()
            try:
                count = int(raw_count)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer count {raw_count!r}") from None
            try:
                depth = float(raw_depth)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric read_depth {raw_depth!r}") from None
            if count < 0:
                raise ParseError(f"{path}:{lineno}: negative count {count}")
            if not (depth > 0 and math.isfinite(depth)):
                raise ParseError(f"{path}:{lineno}: read_depth must be positive, got {raw_depth}")
            yield lineno, LongTableRow(rec[idx["gene"]].strip(), rec[idx["subject"]].strip(),
                                       rec[idx["group"]].strip(), count, depth)


def ingest_counts(path, fmt: str | None = None) -> dict[str, GeneData]:
    """Group a long table by gene, then subject (both in lexicographic order)."""
    cells: dict[str, dict[str, tuple[list[int], list[float]]]] = {}
    group_of: dict[str, dict[str, str]] = {}
    for lineno, row in read_rows(path, fmt):
        g = group_of.setdefault(row.gene, {})
        if g.setdefault(row.subject, row.group) != row.group:
            raise ParseError(f"{path}:{lineno}: subject {row.subject!r} appears in groups "
                             f"{g[row.subject]!r} and {row.group!r} for gene {row.gene!r}")
        c, r = cells.setdefault(row.gene, {}).setdefault(row.subject, ([], []))
        c.append(row.count)
        r.append(row.read_depth)

    out = {}
    for gene in sorted(cells):
        subjects = tuple(sorted(cells[gene]))
        groups = tuple(group_of[gene][s] for s in subjects)
        names = sorted(set(groups))
        if len(names) < 2:
            raise ParseError(f"{path}: gene {gene!r} has fewer than two groups")
        layout = StudyLayout(np.array([names.index(g) for g in groups]))
        samples = tuple(CountSample(np.array(cells[gene][s][0], dtype=np.int64),
                                    np.array(cells[gene][s][1])) for s in subjects)
        out[gene] = GeneData(subjects, groups, layout, samples)
    return out


def write_counts(path, genes: dict[str, GeneData], fmt: str | None = None) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=_delimiter(path, fmt), lineterminator="\n")
        w.writerow(COLUMNS)
        for gene in sorted(genes):
            gd = genes[gene]
            for subj, grp, s in zip(gd.subjects, gd.groups, gd.samples):
                for x, r in zip(s.counts, s.read_depths):
                    w.writerow((gene, subj, grp, int(x), repr(float(r))))


def gene_data_from_samples(samples, layout: StudyLayout) -> GeneData:
    """Name subjects ``s000, s001, ...`` and groups ``g0, g1, ...`` in layout order."""
    subjects = tuple(f"s{i:03d}" for i in range(layout.n))
    groups = tuple(f"g{k}" for k in layout.group_of)
    return GeneData(subjects, groups, layout, tuple(samples))


def load_covariates(path, subjects, diagnosis_col: str) -> CovariateMatrix:
    """Numeric covariates keyed by a ``subject`` column, aligned to ``subjects``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=_delimiter(path, None))
        header = [h.strip() for h in next(reader)]
        if "subject" not in header:
            raise ParseError(f"{path}:1: covariate file needs a 'subject' column")
        names = [h for h in header if h != "subject"]
        if diagnosis_col not in names:
            raise ParseError(f"{path}:1: diagnosis column {diagnosis_col!r} not found")
        table = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            row = dict(zip(header, (v.strip() for v in rec)))
            try:
                table[row["subject"]] = [float(row[n]) for n in names]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: covariates must be numeric "
                                 "(encode categorical columns first)") from None
    missing = [s for s in subjects if s not in table]
    if missing:
        raise ParseError(f"{path}: no covariates for subjects {missing}")
    Z = np.array([table[s] for s in subjects])
    return CovariateMatrix(Z, tuple(names), names.index(diagnosis_col))


# -- the per-gene test pipeline ---------------------------------------------------


def _fit_summary(subject: str, group: str, s: CountSample, res: FitResult) -> dict:
    G = res.estimate
    return {
        "subject": subject,
        "group": group,
        "support": [float(v) for v in G.support],
        "weights": [float(v) for v in G.weights],
        "phi": float(res.phi),
        "log_likelihood": float(res.phi + log_factorial_constant(s)) * s.n,
        "iterations": res.iterations,
        "converged": res.converged,
        "max_phi_prime": float(res.max_phi_prime_at_exit),
    }


def _gene_task(args) -> dict:
    gene, gd, B, cfg, covariates, gene_seed = args
    out = {"gene": gene, "B_used": B, "tests": {}, "fits": [], "error": ""}
    try:
        gd = gd.with_bound(B)
        fits = [fit(s, cfg.solver) for s in gd.samples]
        out["fits"] = [_fit_summary(*t) for t in zip(gd.subjects, gd.groups, gd.samples, fits)]
        out["converged_fraction"] = float(np.mean([f.converged for f in fits]))
        G = [f.estimate for f in fits]
        for smoothed in DISTANCE_MODES[cfg.smoothed]:
            mode = "mixture" if smoothed else "mixing"
            dm = distance_matrix(G, smoothed=smoothed, tail_tol=cfg.tail_tol)
            if covariates is not None:
                res = covariate_permutation_test(dm, covariates, None, cfg.n_perm, gene_seed,
                                                 (cfg.fdr_q,))
            else:
                res = permutation_test(dm, gd.layout, cfg.n_perm, gene_seed, (cfg.fdr_q,))
            out["tests"][mode] = {
                "statistic": None if res.degenerate else float(res.statistic),
                "p_value": float(res.p_value),
                "exceedances": res.exceedances,
                "n_permutations": res.n_permutations,
                "degenerate": res.degenerate,
            }
    except Exception as exc:  # per-gene failures are reported, not raised
        log.warning("gene %s failed: %s", gene, exc)
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def _gene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def resolve_threads(requested: int | None) -> int:
    env = os.environ.get("POISMIX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"POISMIX_THREADS must be an integer, got {env!r}") from None
    return max(1, requested or 1)


def run_test_command(cfg: RunConfig, counts_path, out_path, fmt: str | None = None
                     ) -> list[dict]:
    """Fit, test, and FDR-correct every gene; writes ``out_path`` (CSV) and a
    ``.json`` diagnostics file next to it."""
    genes = ingest_counts(counts_path, fmt)
    if not genes:
        raise ConfigError(f"{counts_path}: no data rows")
    pooled = None
    if not cfg.per_gene_bound:
        pooled = select_bound(np.concatenate([g.all_ratios() for g in genes.values()]), cfg)

    tasks = []
    for i, (gene, gd) in enumerate(genes.items()):
        B = pooled if pooled is not None else select_bound(gd.all_ratios(), cfg)
        cov = None
        if cfg.covariates_path:
            cov = load_covariates(cfg.covariates_path, gd.subjects, cfg.diagnosis_col)
        tasks.append((gene, gd, B, cfg, cov, _gene_seed(cfg.seed, i)))

    threads = resolve_threads(cfg.threads)
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(_gene_task, tasks))
    else:
        done = [_gene_task(t) for t in tasks]

    rows = []
    for mode in ("mixing", "mixture"):
        if mode == "mixing" and cfg.smoothed == "mixture":
            continue
        if mode == "mixture" and cfg.smoothed == "mixing":
            continue
        ok = [g for g in done if not g["error"]]
        p = [g["tests"][mode]["p_value"] for g in ok]
        rejected, q = benjamini_hochberg(p, cfg.fdr_q) if p else ([], [])
        qmap = {g["gene"]: (float(qv), bool(rj)) for g, qv, rj in zip(ok, q, rejected)}
        for g in done:
            t = g["tests"].get(mode, {})
            qv, rj = qmap.get(g["gene"], (None, None))
            if g["gene"] in qmap:
                g["tests"][mode]["q_value"] = qv
                g["tests"][mode]["rejected"] = rj
            rows.append({
                "gene": g["gene"], "distance": mode,
                "statistic": t.get("statistic"), "p_value": t.get("p_value"),
                "q_value": qv, "rejected": rj,
                "converged_fraction": g.get("converged_fraction"),
                "B_used": g["B_used"], "n_subjects": len(genes[g["gene"]].subjects),
                "error": g["error"],
            })
    rows.sort(key=lambda r: (r["gene"], r["distance"]))

    out_path = Path(out_path)
    write_results_csv(out_path, rows)
    config = asdict(cfg)
    config["solver"]["algorithm"] = cfg.solver.algorithm.value
    diagnostics = {"config": config, "genes": sorted(done, key=lambda g: g["gene"])}
    out_path.with_suffix(".json").write_text(dumps(diagnostics), encoding="utf-8")
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in RESULT_FIELDS])


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
