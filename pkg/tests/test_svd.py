from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moegeom import NumericError, thin_svd


def _check_contract(m, u, s, v, tol=1e-10):
    r = min(m.shape)
    assert u.shape == (m.shape[0], r)
    assert v.shape == (m.shape[1], r)
    rec = u @ np.diag(s) @ v.T
    assert np.linalg.norm(rec - m) <= tol * max(1.0, np.linalg.norm(m))
    assert (s >= 0).all()
    assert (np.diff(s) <= 0).all()
    assert np.abs(u.T @ u - np.eye(r)).max() <= tol
    assert np.abs(v.T @ v - np.eye(r)).max() <= tol


def test_identity():
    u, s, v = thin_svd(np.eye(3))
    assert np.allclose(s, [1.0, 1.0, 1.0])


def test_diagonal():
    m = np.diag([3.0, 2.0, 1.0])
    u, s, v = thin_svd(m)
    assert np.allclose(s, [3.0, 2.0, 1.0])
    # u and v are signed permutations of the identity on a diagonal input
    assert np.allclose(np.abs(u), np.eye(3), atol=1e-12)
    assert np.allclose(np.abs(v), np.eye(3), atol=1e-12)
    _check_contract(m, u, s, v)


def test_random_reconstruction():
    m = np.random.default_rng(0).standard_normal((5, 3))
    u, s, v = thin_svd(m)
    _check_contract(m, u, s, v)


@pytest.mark.parametrize("shape", [(5, 3), (3, 5), (1, 4), (4, 1), (8, 8), (64, 5)])
def test_shapes(shape):
    m = np.random.default_rng(7).standard_normal(shape)
    _check_contract(m, *thin_svd(m))


def test_input_not_mutated():
    m = np.random.default_rng(1).standard_normal((4, 6))
    before = m.copy()
    thin_svd(m)
    thin_svd(m.T)
    assert np.array_equal(m, before)


def test_rank_deficient_keeps_orthonormal_u():
    m = np.array([[2 ** -0.5, 0.0], [2 ** -0.5, 0.0]])
    u, s, v = thin_svd(m)
    assert np.allclose(s, [1.0, 0.0], atol=1e-12)
    assert np.abs(u.T @ u - np.eye(2)).max() <= 1e-10
    _check_contract(m, u, s, v)


def test_zero_matrix():
    u, s, v = thin_svd(np.zeros((4, 3)))
    assert np.allclose(s, 0.0)
    assert np.abs(u.T @ u - np.eye(3)).max() <= 1e-10


def test_nonconvergence_raises():
    m = np.random.default_rng(2).standard_normal((6, 6))
    with pytest.raises(NumericError):
        thin_svd(m, max_sweeps=0)


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        thin_svd(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_matches_scaled_spectrum():
    # Known spectrum: build m = q1 diag(vals) q2^T from random rotations.
    rng = np.random.default_rng(3)
    q1, _, _ = thin_svd(rng.standard_normal((7, 7)))
    q2, _, _ = thin_svd(rng.standard_normal((5, 5)))
    vals = np.array([9.0, 4.0, 1.0, 0.25, 0.0])
    m = q1[:, :5] @ np.diag(vals) @ q2.T
    _, s, _ = thin_svd(m)
    assert np.allclose(s, vals, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(
    rows=st.integers(1, 10),
    cols=st.integers(1, 10),
    seed=st.integers(0, 2 ** 31),
)
def test_contract_property(rows, cols, seed):
    m = np.random.default_rng(seed).standard_normal((rows, cols)) * 3.0
    _check_contract(m, *thin_svd(m))
