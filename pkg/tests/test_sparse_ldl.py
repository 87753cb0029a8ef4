"""Sparse factorization and selected inverse against dense oracles."""

import numpy as np
import pytest
from scipy import sparse

from frailtyboost.sparse_ldl import FactorizationError, SparseLDL, gather_entries

from helpers import small_structure


def make_spd(n=150, m=8, seed=0):
    struct, *_ = small_structure(n=n, m=m, seed=seed)
    rng = np.random.default_rng(seed)
    W = sparse.diags(rng.random(n) * 3.0)
    return (struct.precision() + W).tocsc()


class TestFactorization:
    def test_logdet_and_solve(self):
        A = make_spd(seed=1)
        f = SparseLDL(A)
        sign, ld = np.linalg.slogdet(A.toarray())
        assert sign > 0
        assert f.logdet() == pytest.approx(ld, abs=1e-9)
        rng = np.random.default_rng(2)
        x = rng.normal(size=A.shape[0])
        assert np.abs(f.solve(A @ x) - x).max() < 1e-10
        X = rng.normal(size=(A.shape[0], 130))
        assert np.abs(f.solve(A @ X) - X).max() < 1e-10

    def test_rejects_indefinite(self):
        A = sparse.diags(np.array([1.0, -1.0, 2.0])).tocsc()
        with pytest.raises(FactorizationError):
            SparseLDL(A)

    def test_extreme_scaling(self):
        # precision-like matrices from nearly degenerate priors are huge but
        # still SPD; the factorization must stay finite
        A = make_spd(seed=3)
        f = SparseLDL(A * 1e10)
        assert np.isfinite(f.logdet())


class TestSelectedInverse:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_dense_inverse(self, seed):
        A = make_spd(seed=seed)
        f = SparseLDL(A)
        S = f.selected_inverse()
        dense = np.linalg.inv(A.toarray())
        r, c = S.nonzero()
        assert np.abs(np.asarray(S[r, c]).ravel() - dense[r, c]).max() < 1e-10

    def test_pattern_covers_input(self):
        A = make_spd(seed=4)
        f = SparseLDL(A)
        S = f.selected_inverse()
        acoo = A.tocoo()
        got = gather_entries(S, acoo.row, acoo.col)
        dense = np.linalg.inv(A.toarray())
        assert np.abs(got - dense[acoo.row, acoo.col]).max() < 1e-10

    def test_gather_missing_entry_raises(self):
        S = sparse.csr_matrix(np.diag([1.0, 2.0, 3.0]))
        with pytest.raises(FactorizationError):
            gather_entries(S, np.array([0]), np.array([2]))

    def test_gather_reads_values(self):
        M = sparse.csr_matrix(np.array([[1.0, 0, 4.0], [0, 2.0, 0], [4.0, 0, 3.0]]))
        got = gather_entries(M, np.array([0, 2, 1]), np.array([2, 0, 1]))
        assert np.allclose(got, [4.0, 4.0, 2.0])
