"""Median W1 between the NPMLE and the true mixing law as N grows.

    python scripts/consistency_trend.py --sizes 50 500 5000 --reps 20
"""

from __future__ import annotations

import argparse

import numpy as np

from poismix.likelihood import CountSample
from poismix.measures import w1_measures
from poismix.simulate import SubjectMixing
from poismix.solvers import SolverConfig, fit


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", nargs="+", type=int, default=[50, 500, 5000])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--shape", type=float, default=6.0)
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--bound", type=float, default=20.0)
    p.add_argument("--stop-tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    Q = SubjectMixing(a.shape, a.rate, a.bound)
    Q_ref = Q.discretize(4096)
    cfg = SolverConfig(algorithm="VEM", stop_tol=a.stop_tol)
    rng = np.random.default_rng(a.seed)
    print("N\tmedian_w1\tq25\tq75")
    for N in a.sizes:
        d = [w1_measures(fit(CountSample.unit_depth(rng.poisson(Q.sample(rng, N)), a.bound),
                             cfg).estimate, Q_ref) for _ in range(a.reps)]
        q25, med, q75 = np.percentile(d, [25, 50, 75])
        print(f"{N}\t{med:.4f}\t{q25:.4f}\t{q75:.4f}", flush=True)


if __name__ == "__main__":
    main()
