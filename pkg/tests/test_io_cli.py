import csv
import json

import numpy as np
import pytest

from poismix.anova import StudyLayout
from poismix.cli import main
from poismix.io import (
    ConfigError,
    ParseError,
    RunConfig,
    gene_data_from_samples,
    ingest_counts,
    resolve_threads,
    run_test_command,
    select_bound,
    write_counts,
)
from poismix.likelihood import CountSample
from poismix.measures import DomainError
from poismix.simulate import DesignSpec, generate_dataset, get_model
from poismix.solvers import SolverConfig

HEADER = "gene\tsubject\tgroup\tcount\tread_depth\n"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def small_table():
    lines = [HEADER]
    rng = np.random.default_rng(0)
    for gene in ("geneB", "geneA"):
        for subj, grp in (("s2", "ctl"), ("s1", "ctl"), ("s3", "case"), ("s4", "case")):
            for _ in range(3):
                lines.append(f"{gene}\t{subj}\t{grp}\t{rng.poisson(4)}\t{rng.uniform(0.5, 1.5)!r}\n")
    return "".join(lines)


def synthetic_file(path, model, n_genes, n_cells, seed, n_k=(10, 10)):
    design = DesignSpec.make("A", n_cells=n_cells, n_k=n_k)
    m0, m1 = get_model(model)
    genes = {}
    for g in range(n_genes):
        ds = generate_dataset(design, m0, m1, [seed, g])
        genes[f"gene{g:02d}"] = gene_data_from_samples(ds.samples, ds.layout)
    write_counts(path, genes)
    return genes


# -- select_bound --------------------------------------------------------------------


def test_select_bound_examples():
    cfg = RunConfig()
    assert select_bound(np.full(100, 15.09), cfg) == 25.0
    assert select_bound(np.full(100, 15.09), RunConfig(B=20)) == 20.0
    assert select_bound(np.zeros(10), cfg) == 5.0
    assert select_bound(np.full(10, 3.0), cfg) == 5.0
    # exact multiples stay put: 4/3 * 15 = 20
    assert select_bound(np.full(10, 15.0), cfg) == 20.0
    with pytest.raises(DomainError):
        select_bound([], cfg)


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(b_quantile=1.0)
    with pytest.raises(ConfigError):
        RunConfig(b_factor=0.5)
    with pytest.raises(ConfigError):
        RunConfig(smoothed="yes")


# -- ingestion -------------------------------------------------------------------------


def test_ingest_structure(tmp_path):
    genes = ingest_counts(write(tmp_path, "c.tsv", small_table()))
    assert list(genes) == ["geneA", "geneB"]
    for gd in genes.values():
        assert gd.subjects == ("s1", "s2", "s3", "s4")
        assert gd.groups == ("ctl", "ctl", "case", "case")
        assert gd.layout.group_of.tolist() == [1, 1, 0, 0]
        assert [s.n for s in gd.samples] == [3, 3, 3, 3]


def test_ingest_round_trip(tmp_path):
    src = write(tmp_path, "c.tsv", small_table())
    first = ingest_counts(src)
    write_counts(tmp_path / "again.csv", first)
    second = ingest_counts(tmp_path / "again.csv")
    write_counts(tmp_path / "third.csv", second)
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "third.csv").read_bytes()
    for g in first:
        a, b = first[g], second[g]
        assert a.subjects == b.subjects and a.groups == b.groups
        for x, y in zip(a.samples, b.samples):
            assert np.array_equal(x.counts, y.counts)
            assert np.array_equal(x.read_depths, y.read_depths)


@pytest.mark.parametrize("text, match", [
    ("gene\tsubject\tgroup\tcount\tcount\tread_depth\n", "duplicate"),
    ("gene\tsubject\tcount\tread_depth\n", "missing"),
    (HEADER + "g\ts1\ta\tx\t1.0\n", ":2: non-integer count"),
    (HEADER + "g\ts1\ta\t1\t1.0\ng\ts1\ta\t2\t0\n", ":3: read_depth must be positive"),
    (HEADER + "g\ts1\ta\t1\t1.0\ng\ts1\tb\t2\t1.0\n", ":3: subject 's1' appears in groups"),
    (HEADER + "g\ts1\ta\t-1\t1.0\n", ":2: negative count"),
])
def test_ingest_errors(tmp_path, text, match):
    with pytest.raises(ParseError, match=match):
        ingest_counts(write(tmp_path, "bad.tsv", text))


# -- test pipeline ------------------------------------------------------------------------


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_identical_groups_not_rejected(tmp_path):
    lines = [HEADER]
    for subj, grp in (("a1", "A"), ("a2", "A"), ("b1", "B"), ("b2", "B")):
        lines += [f"g1\t{subj}\t{grp}\t{x}\t1.0\n" for x in (0, 2, 3, 5, 5)]
    out = tmp_path / "res.csv"
    rows = run_test_command(RunConfig(n_perm=200), write(tmp_path, "c.tsv", "".join(lines)), out)
    assert {r["distance"] for r in rows} == {"mixing", "mixture"}
    for r in rows:
        assert r["p_value"] == 1.0 and r["rejected"] is False
    diag = json.loads(out.with_suffix(".json").read_text())
    assert diag["genes"][0]["tests"]["mixing"]["degenerate"]


def test_alternative_genes_are_rejected(tmp_path):
    path = tmp_path / "alt.tsv"
    synthetic_file(path, "2a", n_genes=10, n_cells=500, seed=3)
    out = tmp_path / "alt.csv"
    rows = run_test_command(RunConfig(n_perm=200, smoothed="mixing"), path, out)
    assert sum(r["rejected"] for r in rows) >= 9
    assert all(r["B_used"] == rows[0]["B_used"] for r in rows)


def test_result_table_invariants(tmp_path):
    path = tmp_path / "mixed.tsv"
    synthetic_file(path, "1a", n_genes=6, n_cells=30, seed=4, n_k=(4, 4))
    rows = run_test_command(RunConfig(n_perm=100), path, tmp_path / "r.csv")
    for mode in ("mixing", "mixture"):
        sub = sorted((r for r in rows if r["distance"] == mode), key=lambda r: r["p_value"])
        assert all(0 < r["p_value"] <= 1 for r in sub)
        qs = [r["q_value"] for r in sub]
        assert qs == sorted(qs)
    header = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
    for col in ("gene", "statistic", "p_value", "q_value", "converged_fraction", "B_used"):
        assert col in header


def test_per_gene_bound(tmp_path):
    text = HEADER + "".join(
        f"{g}\t{s}\t{grp}\t{x}\t1.0\n"
        for g, scale in (("lo", 1), ("hi", 10))
        for s, grp in (("a", "A"), ("b", "A"), ("c", "B"), ("d", "B"))
        for x in np.array([1, 2, 3]) * scale)
    path = write(tmp_path, "c.tsv", text)
    rows = run_test_command(RunConfig(n_perm=20, per_gene_bound=True, smoothed="mixing"),
                            path, tmp_path / "r.csv")
    B = {r["gene"]: r["B_used"] for r in rows}
    assert B == {"hi": 40.0, "lo": 5.0}


def test_covariate_pipeline(tmp_path):
    path = tmp_path / "c.tsv"
    genes = synthetic_file(path, "2a", n_genes=2, n_cells=200, seed=6, n_k=(6, 6))
    subjects = genes["gene00"].subjects
    rng = np.random.default_rng(0)
    cov = ["subject,diagnosis,age\n"] + [
        f"{s},{int(i >= 6)},{rng.normal():.6f}\n" for i, s in enumerate(subjects)]
    cov_path = write(tmp_path, "cov.csv", "".join(cov))
    rows = run_test_command(RunConfig(n_perm=200, covariates_path=str(cov_path)), path,
                            tmp_path / "r.csv")
    assert all(not r["error"] for r in rows)
    assert any(r["rejected"] for r in rows if r["distance"] == "mixing")


def test_per_gene_failure_is_recorded(tmp_path, monkeypatch):
    import poismix.io as io_mod

    path = write(tmp_path, "c.tsv", small_table())
    real = io_mod.fit
    calls = []

    def flaky(s, cfg=None):
        calls.append(1)
        if len(calls) == 1:  # the first gene stops at its first subject
            raise RuntimeError("boom")
        return real(s, cfg)

    monkeypatch.setattr(io_mod, "fit", flaky)
    rows = run_test_command(RunConfig(n_perm=20), path, tmp_path / "r.csv")
    assert len(rows) == 4
    failed = {r["gene"] for r in rows if r["error"]}
    assert failed == {"geneA"}
    assert all(r["p_value"] is None for r in rows if r["gene"] == "geneA")
    assert all(r["q_value"] is not None for r in rows if r["gene"] == "geneB")


def test_threads_env_override(monkeypatch):
    monkeypatch.setenv("POISMIX_THREADS", "3")
    assert resolve_threads(1) == 3
    monkeypatch.setenv("POISMIX_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads(1)
    monkeypatch.delenv("POISMIX_THREADS")
    assert resolve_threads(None) == 1


# -- command line ----------------------------------------------------------------------------


def test_cli_simulate_byte_stable(tmp_path):
    args = ["simulate", "A", "1a", "--rounds", "2", "--n-perm", "30", "--n-cells", "20",
            "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for ext in ("json", "csv"):
        assert (tmp_path / f"a.{ext}").read_bytes() == (tmp_path / f"b.{ext}").read_bytes()
    report = json.loads((tmp_path / "a.json").read_text())
    assert report["rounds"] == 2 and report["model"] == "1a" and report["design"] == "A"


def test_cli_errors(tmp_path, capsys):
    assert main(["simulate", "A", "9z", "--out", str(tmp_path / "x")]) == 2
    assert "valid models" in capsys.readouterr().err
    assert main(["simulate", "A", "1a", "--rounds", "0", "--out", str(tmp_path / "x")]) == 2
    assert main(["test", str(tmp_path / "missing.tsv"), "--out", str(tmp_path / "r.csv")]) == 2
    bad = write(tmp_path, "bad.tsv", "gene\tsubject\n")
    assert main(["test", str(bad), "--out", str(tmp_path / "r.csv")]) == 2


def test_cli_fit_w1_test(tmp_path):
    counts = write(tmp_path, "c.tsv", small_table())
    fits = tmp_path / "fits.json"
    assert main(["fit", str(counts), "--b", "20", "--out", str(fits)]) == 0
    data = json.loads(fits.read_text())
    assert set(data) == {"geneA", "geneB"} and data["geneA"]["B"] == 20
    w1 = tmp_path / "w1.csv"
    assert main(["w1", str(fits), "--out", str(w1)]) == 0
    rows = read_csv(w1)
    assert len(rows) == 2 * 2 * 6
    assert all(float(r["w1"]) >= 0 for r in rows)
    out1, out2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    for out in (out1, out2):
        assert main(["test", str(counts), "--n-perm", "50", "--seed", "1", "--out", str(out)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert out1.with_suffix(".json").read_bytes() == out2.with_suffix(".json").read_bytes()


def test_cli_signal(tmp_path):
    out = tmp_path / "sig.json"
    assert main(["signal", "1a", "--mc-reps", "100", "--seed", "2", "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["mc_reps"] == 100 and abs(payload["D"]) < 0.1


def test_gene_data_from_samples_names():
    lay = StudyLayout.from_sizes([1, 2])
    gd = gene_data_from_samples([CountSample.unit_depth([1])] * 3, lay)
    assert gd.subjects == ("s000", "s001", "s002")
    assert gd.groups == ("g0", "g1", "g1")


def test_solver_config_in_diagnostics(tmp_path):
    out = tmp_path / "r.csv"
    cfg = RunConfig(n_perm=10, solver=SolverConfig(algorithm="ISDM"), smoothed="mixture")
    run_test_command(cfg, write(tmp_path, "c.tsv", small_table()), out)
    diag = json.loads(out.with_suffix(".json").read_text())
    assert diag["config"]["solver"]["algorithm"] == "ISDM"
    assert {r["distance"] for r in read_csv(out)} == {"mixture"}
