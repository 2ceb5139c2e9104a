"""Command-line entry point: ``poismix {fit,w1,test,simulate,signal}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .io import (
    ConfigError,
    ParseError,
    RunConfig,
    _fit_summary,
    dumps,
    ingest_counts,
    resolve_threads,
    run_test_command,
    select_bound,
)
from .measures import DiscreteMeasure, DomainError, poisson_smooth, w1_measures, w1_pmfs
from .simulate import MODELS, SIM_TAIL_TOL, DesignSpec, get_model, run_power_study, signal_strength
from .solvers import SolverConfig, fit

log = logging.getLogger("poismix")


def _solver_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algorithm", choices=("VDM", "VEM", "ISDM"), default="VEM")
    p.add_argument("--stop-tol", type=float, default=0.01)
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--grid-size", type=int, default=1000)


def _bound_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--b", type=float, default=None, help="support bound B (default: data-driven)")
    p.add_argument("--b-quantile", type=float, default=0.99)
    p.add_argument("--b-factor", type=float, default=4 / 3)
    p.add_argument("--per-gene-b", action="store_true",
                   help="choose B per gene instead of pooling over all genes")


def _solver_cfg(a) -> SolverConfig:
    return SolverConfig(algorithm=a.algorithm, stop_tol=a.stop_tol, max_iters=a.max_iters,
                        grid_size=a.grid_size)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poismix", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one NPMLE per gene and subject")
    p.add_argument("counts", help="long-format TSV/CSV: gene, subject, group, count, read_depth")
    p.add_argument("--gene", action="append", help="restrict to these genes")
    _bound_args(p)
    _solver_args(p)
    p.add_argument("--out", required=True, help="JSON file of fitted measures")

    p = sub.add_parser("w1", help="pairwise W1 distances between fitted measures")
    p.add_argument("fits", help="JSON written by 'poismix fit'")
    p.add_argument("--gene", action="append")
    p.add_argument("--smoothed", choices=("mixing", "mixture", "both"), default="both")
    p.add_argument("--tail-tol", type=float, default=1e-10)
    p.add_argument("--out", required=True, help="CSV: gene, distance, subject_a, subject_b, w1")

    p = sub.add_parser("test", help="per-gene permutation tests with FDR control")
    p.add_argument("counts")
    _bound_args(p)
    _solver_args(p)
    p.add_argument("--n-perm", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--smoothed", choices=("mixing", "mixture", "both"), default="both")
    p.add_argument("--covariates", default=None, help="CSV with a subject column")
    p.add_argument("--diagnosis-col", default="diagnosis")
    p.add_argument("--fdr-q", type=float, default=0.05)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="result CSV; diagnostics go to <out>.json")

    p = sub.add_parser("simulate", help="empirical size/power of both tests")
    p.add_argument("design", choices=("A", "B", "C"))
    p.add_argument("model", help=f"one of {', '.join(MODELS)}")
    p.add_argument("--n-cells", type=int, default=50, help="cells per subject (designs A, B)")
    p.add_argument("--rounds", type=int, default=1000)
    p.add_argument("--n-perm", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="output prefix; writes <out>.json and <out>.csv")

    p = sub.add_parser("signal", help="Monte Carlo signal strengths D and D_h")
    p.add_argument("model")
    p.add_argument("--mc-reps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="JSON file (default: stdout)")
    return parser


def cmd_fit(a) -> int:
    genes = ingest_counts(a.counts)
    if a.gene:
        genes = {g: genes[g] for g in a.gene if g in genes}
    cfg = RunConfig(B=a.b, b_quantile=a.b_quantile, b_factor=a.b_factor)
    solver = _solver_cfg(a)
    pooled = select_bound(np.concatenate([g.all_ratios() for g in genes.values()]), cfg)
    out = {}
    for gene, gd in genes.items():
        B = select_bound(gd.all_ratios(), cfg) if a.per_gene_b else pooled
        gd = gd.with_bound(B)
        fits = [fit(s, solver) for s in gd.samples]
        out[gene] = {"B": B, "subjects": [_fit_summary(*t) for t in
                                          zip(gd.subjects, gd.groups, gd.samples, fits)]}
    Path(a.out).write_text(dumps(out), encoding="utf-8")
    return 0


def cmd_w1(a) -> int:
    data = json.loads(Path(a.fits).read_text(encoding="utf-8"))
    modes = {"mixing": ("mixing",), "mixture": ("mixture",), "both": ("mixing", "mixture")}
    with Path(a.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("gene", "distance", "subject_a", "subject_b", "w1"))
        for gene in sorted(data):
            if a.gene and gene not in a.gene:
                continue
            B = float(data[gene]["B"])
            subs = data[gene]["subjects"]
            G = [DiscreteMeasure(s["support"], s["weights"], B) for s in subs]
            H = [poisson_smooth(g, a.tail_tol) for g in G]
            for mode in modes[a.smoothed]:
                for i in range(len(G)):
                    for j in range(i + 1, len(G)):
                        d = w1_measures(G[i], G[j]) if mode == "mixing" else w1_pmfs(H[i], H[j])
                        w.writerow((gene, mode, subs[i]["subject"], subs[j]["subject"], repr(d)))
    return 0


def cmd_test(a) -> int:
    cfg = RunConfig(B=a.b, b_quantile=a.b_quantile, b_factor=a.b_factor,
                    per_gene_bound=a.per_gene_b, solver=_solver_cfg(a), n_perm=a.n_perm,
                    seed=a.seed, smoothed=a.smoothed, fdr_q=a.fdr_q,
                    covariates_path=a.covariates, diagnosis_col=a.diagnosis_col,
                    threads=resolve_threads(a.threads))
    rows = run_test_command(cfg, a.counts, a.out)
    failed = sum(1 for r in rows if r["error"])
    log.info("tested %d gene/distance pairs (%d failed)", len(rows), failed)
    return 0


def cmd_simulate(a) -> int:
    if a.rounds < 1:
        raise ConfigError("rounds must be at least 1")
    m0, m1 = get_model(a.model)
    design = DesignSpec.make(a.design, n_cells=a.n_cells)
    report = run_power_study(design, m0, m1, a.rounds, a.n_perm, a.alpha, a.seed,
                             threads=resolve_threads(a.threads),
                             design_id=a.design, model_id=a.model)
    log.info("simulate %s %s: %.1f s wall time", a.design, a.model, report.wall_time)
    prefix = Path(a.out)
    Path(f"{prefix}.json").write_text(report.to_json(), encoding="utf-8")
    with Path(f"{prefix}.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=report.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow(report.csv_row())
    return 0


def cmd_signal(a) -> int:
    m0, m1 = get_model(a.model)
    s = signal_strength(m0, m1, a.mc_reps, a.seed)
    payload = dumps({"model": a.model, "D": s.D, "D_h": s.D_h, "se_D": s.se_D,
                     "se_D_h": s.se_D_h, "mc_reps": s.mc_reps, "seed": a.seed,
                     "tail_tol": SIM_TAIL_TOL})
    if a.out:
        Path(a.out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    return 0


COMMANDS = {"fit": cmd_fit, "w1": cmd_w1, "test": cmd_test, "simulate": cmd_simulate,
            "signal": cmd_signal}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParseError, DomainError, ValueError, OSError) as exc:
        print(f"poismix {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
