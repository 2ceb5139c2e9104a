import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from statsmodels.stats.multitest import multipletests

from poismix.anova import (
    CovariateMatrix,
    DegenerateStatisticError,
    DesignError,
    DistanceMatrix,
    StudyLayout,
    benjamini_hochberg,
    covariate_permutation_test,
    covariate_pseudo_f,
    distance_matrix,
    gower_center,
    permutation_test,
    pseudo_f,
    pseudo_f_from_gram,
)
from poismix.measures import DiscreteMeasure, DomainError, point_mass

from .oracles import centered_gram, dense_covariate_f, textbook_anova_ratio

B = 20.0


def sq_dists(points):
    p = np.asarray(points, float)
    return DistanceMatrix((p[:, None] - p[None, :]) ** 2)


# -- layout and distances -------------------------------------------------------


def test_layout():
    lay = StudyLayout.from_sizes([3, 2])
    assert lay.K == 2 and lay.n == 5
    assert lay.n_k.tolist() == [3, 2]
    with pytest.raises(DesignError):
        StudyLayout.from_sizes([4])
    with pytest.raises(DesignError):
        StudyLayout(np.array([0, 0, 2, 2]))


def test_distance_matrix_validation():
    with pytest.raises(DomainError):
        DistanceMatrix(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(DomainError):
        DistanceMatrix(np.array([[1.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(DomainError):
        DistanceMatrix(np.array([[0.0, -1.0], [-1.0, 0.0]]))


def test_distance_matrix_examples():
    G = DiscreteMeasure.from_atoms([1, 2], [0.5, 0.5], B)
    assert not distance_matrix([G, G, G]).values.any()
    d = distance_matrix([point_mass(1, B), point_mass(4, B)]).values
    assert d[0, 1] == pytest.approx(9.0)
    ds = distance_matrix([point_mass(1, B), point_mass(4, B)], smoothed=True).values
    assert 9 * (1 - 1e-8) <= ds[0, 1] <= 25
    # Poisson(1) and Poisson(4) are stochastically ordered, so W1 is the mean gap
    assert ds[0, 1] == pytest.approx(9.0, rel=1e-8)
    with pytest.raises(DomainError):
        distance_matrix([point_mass(1, B), point_mass(1, 10)])


# -- pseudo-F ---------------------------------------------------------------------


def test_pseudo_f_examples():
    lay = StudyLayout.from_sizes([2, 2])
    d = np.ones((4, 4)) - np.eye(4)
    assert pseudo_f(DistanceMatrix(d), lay) == pytest.approx(0.5, rel=1e-15)
    blocks = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]], float)
    with pytest.raises(DegenerateStatisticError):
        pseudo_f(DistanceMatrix(blocks), lay)


def test_pseudo_f_is_one_way_anova_ratio():
    rng = np.random.default_rng(11)
    for _ in range(50):
        sizes = rng.integers(2, 8, size=rng.integers(2, 5))
        lay = StudyLayout.from_sizes(sizes)
        x = rng.normal(rng.normal(size=lay.K)[lay.group_of], 1.0)
        assert pseudo_f(sq_dists(x), lay) == pytest.approx(
            textbook_anova_ratio(x, lay.group_of), rel=1e-10, abs=1e-10)


def _ssw(x, groups):
    return sum(((x[groups == g] - x[groups == g].mean()) ** 2).sum() for g in np.unique(groups))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_total_sum_of_squares_is_label_free(seed):
    rng = np.random.default_rng(seed)
    lay = StudyLayout.from_sizes([4, 5, 3])
    x = rng.normal(size=lay.n)
    d = sq_dists(x)
    total = d.values.sum() / lay.n
    # on the full matrix the squared-distance sums are twice the scalar sums of squares
    assert total == pytest.approx(2 * ((x - x.mean()) ** 2).sum(), rel=1e-12)
    for labels in (lay.group_of, lay.group_of[rng.permutation(lay.n)]):
        F = pseudo_f(d, StudyLayout(labels))
        assert total / (F + 1) == pytest.approx(2 * _ssw(x, labels), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_pseudo_f_invariant_to_group_relabelling(seed):
    rng = np.random.default_rng(seed)
    lay = StudyLayout.from_sizes([3, 4, 2])
    d = sq_dists(rng.normal(size=lay.n))
    relabel = rng.permutation(lay.K)
    assert pseudo_f(d, StudyLayout(relabel[lay.group_of])) == pytest.approx(
        pseudo_f(d, lay), rel=1e-12)


# -- permutation test ---------------------------------------------------------------


def test_zero_matrix_is_degenerate():
    res = permutation_test(DistanceMatrix(np.zeros((4, 4))), StudyLayout.from_sizes([2, 2]),
                           10, seed=0)
    assert res.degenerate and res.p_value == 1.0


def test_identity_permutation_gives_p_one():
    lay = StudyLayout.from_sizes([2, 3])
    d = sq_dists([0.0, 0.3, 2.0, 2.4, 2.1])
    res = permutation_test(d, lay, 1, seed=0, permutations=np.arange(5)[None, :])
    assert res.p_value == 1.0 and res.exceedances == 1


def test_permuted_statistics_match_direct_relabelling():
    rng = np.random.default_rng(5)
    lay = StudyLayout.from_sizes([3, 4])
    d = sq_dists(rng.normal(size=7))
    perms = np.array([rng.permutation(7) for _ in range(20)])
    F = pseudo_f(d, lay)
    expected = []
    for order in perms:
        labels = np.empty(7, int)
        labels[order] = lay.group_of
        expected.append(pseudo_f(d, StudyLayout(labels)) >= F - 1e-12 * max(1, F))
    res = permutation_test(d, lay, 20, seed=0, permutations=perms)
    assert res.exceedances == sum(expected)
    assert res.p_value == (1 + sum(expected)) / 21


def test_permutation_test_reproducible_and_powerful():
    lay = StudyLayout.from_sizes([6, 6])
    x = np.r_[np.zeros(6), np.full(6, 3.0)] + np.random.default_rng(1).normal(0, 0.2, 12)
    d = sq_dists(x)
    a = permutation_test(d, lay, 500, seed=9)
    b = permutation_test(d, lay, 500, seed=9)
    assert a.p_value == b.p_value
    assert a.p_value == pytest.approx(1 / 501)
    assert a.reject_at[0.05]


# -- covariates ----------------------------------------------------------------------


def test_gower_center_examples():
    assert not gower_center(DistanceMatrix(np.zeros((3, 3)))).any()
    x = np.array([0.0, 1.0, 3.0, 7.0])
    np.testing.assert_allclose(gower_center(sq_dists(x)), centered_gram(x), atol=1e-12)


def test_gower_clips_non_euclidean():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.uniform(0, 1, (15, 15))
        d = np.abs(a + a.T)
        np.fill_diagonal(d, 0)
        G = gower_center(DistanceMatrix(d))
        assert np.linalg.eigvalsh(G).min() >= -1e-8
        assert np.allclose(G, G.T)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_gower_projection_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(9, 3))
    d = DistanceMatrix(((pts[:, None] - pts[None]) ** 2).sum(-1))
    G = gower_center(d)
    n = d.n
    J = np.eye(n) - 1 / n
    np.testing.assert_allclose(J @ G @ J, G, atol=1e-10)
    np.testing.assert_allclose(G.sum(axis=0), 0, atol=1e-10)


def test_saturated_design_is_degenerate():
    G = centered_gram(np.arange(5.0))
    with pytest.raises(DegenerateStatisticError):
        pseudo_f_from_gram(G, np.eye(5))


def test_single_basis_column():
    n = 6
    assert pseudo_f_from_gram(np.eye(n), np.eye(n)[:, :1]) == pytest.approx(1 / (n - 1))


def test_rank_deficient_design():
    Z = np.c_[np.ones(5), np.ones(5)]
    with pytest.raises(DesignError):
        pseudo_f_from_gram(np.eye(5), Z)


def test_covariate_f_matches_dense_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        pts = rng.normal(size=(15, 2))
        d = DistanceMatrix(((pts[:, None] - pts[None]) ** 2).sum(-1))
        Z = CovariateMatrix(np.c_[rng.integers(0, 2, 15), rng.normal(size=15), np.ones(15)])
        G = gower_center(d)
        assert covariate_pseudo_f(d, Z) == pytest.approx(dense_covariate_f(G, Z.values),
                                                         rel=1e-9)


def test_constant_diagnosis_gives_p_one():
    rng = np.random.default_rng(0)
    x = rng.normal(size=8)
    Z = CovariateMatrix(np.c_[np.ones(8), rng.normal(size=8)], diagnosis_col=0)
    res = covariate_permutation_test(sq_dists(x), Z, n_perm=50, seed=1)
    assert res.p_value == 1.0


def test_covariate_test_detects_diagnosis_effect():
    rng = np.random.default_rng(3)
    diag = np.repeat([0.0, 1.0], 8)
    age = rng.normal(size=16)
    x = 3 * diag + 0.5 * age + rng.normal(0, 0.3, 16)
    Z = CovariateMatrix(np.c_[diag, age], names=("diagnosis", "age"))
    res = covariate_permutation_test(sq_dists(x), Z, n_perm=300, seed=2)
    assert res.p_value < 0.01


# -- Benjamini-Hochberg -------------------------------------------------------------


def test_bh_examples():
    rej, adj = benjamini_hochberg([0.01, 0.5], 0.05)
    assert rej.tolist() == [True, False]
    rej, adj = benjamini_hochberg([1.0, 1.0, 1.0])
    assert not rej.any() and adj.tolist() == [1.0, 1.0, 1.0]
    rej, _ = benjamini_hochberg([0.01, 0.02, 0.03, 0.5], 0.05)
    assert rej.tolist() == [True, True, True, False]
    with pytest.raises(DomainError):
        benjamini_hochberg([0.2, 1.5])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.01, 0.5))
def test_bh_matches_statsmodels(p, q):
    rej, adj = benjamini_hochberg(p, q)
    ref_rej, ref_adj, _, _ = multipletests(p, alpha=q, method="fdr_bh")
    assert rej.tolist() == ref_rej.tolist()
    np.testing.assert_allclose(adj, ref_adj, rtol=1e-12, atol=1e-15)


def test_bh_null_rejects_almost_nothing():
    rng = np.random.default_rng(0)
    counts = [benjamini_hochberg(rng.uniform(size=100), 0.05)[0].sum() for _ in range(200)]
    # under the global null, P(any rejection) <= q
    assert np.mean(np.array(counts) > 0) <= 0.1
