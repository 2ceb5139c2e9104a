"""Write a long-format count table of simulated genes for ``poismix test``.

Each gene is one design-A study drawn from the chosen model, so the first
group follows the model's null mixing law and the second its alternative.

    python scripts/make_synthetic.py --model 2a --genes 20 --n-cells 200 --out counts.tsv
"""

from __future__ import annotations

import argparse

from poismix.io import gene_data_from_samples, write_counts
from poismix.simulate import DesignSpec, generate_dataset, get_model


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", default="2a")
    p.add_argument("--genes", type=int, default=20)
    p.add_argument("--n-cells", type=int, default=200)
    p.add_argument("--subjects", nargs=2, type=int, default=[10, 10])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="counts.tsv")
    a = p.parse_args()
    design = DesignSpec.make("A", n_cells=a.n_cells, n_k=tuple(a.subjects))
    m0, m1 = get_model(a.model)
    genes = {}
    for g in range(a.genes):
        data = generate_dataset(design, m0, m1, [a.seed, g])
        genes[f"gene{g:03d}"] = gene_data_from_samples(data.samples, data.layout)
    write_counts(a.out, genes)
    print(f"wrote {a.genes} genes to {a.out}")


if __name__ == "__main__":
    main()
