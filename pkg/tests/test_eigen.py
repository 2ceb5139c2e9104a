import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poismix.eigen import sym_eigen
from poismix.measures import DomainError


def test_diagonal():
    vals, vecs = sym_eigen(np.diag([3.0, -1.0, 2.0]))
    assert vals.tolist() == [-1.0, 2.0, 3.0]
    assert np.array_equal(np.abs(vecs), np.abs(vecs).round())
    assert np.allclose(np.abs(vecs).sum(axis=0), 1)


def test_two_by_two():
    vals, _ = sym_eigen(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert vals == pytest.approx([1.0, 3.0], abs=1e-14)


def test_rejects_non_symmetric():
    with pytest.raises(DomainError):
        sym_eigen(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(DomainError):
        sym_eigen(np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 25), st.integers(0, 2**31))
def test_matches_lapack(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    M = (A + A.T) / 2
    vals, vecs = sym_eigen(M)
    ref = np.linalg.eigvalsh(M)
    scale = max(1.0, np.abs(ref).max())
    assert np.allclose(vals, ref, atol=1e-10 * scale)
    assert np.allclose(vecs.T @ vecs, np.eye(n), atol=1e-10)
    assert np.allclose((vecs * vals) @ vecs.T, M, atol=1e-10 * scale)
