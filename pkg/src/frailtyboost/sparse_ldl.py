"""Sparse symmetric positive definite solves and selected inversion.

Wraps a sparse LDL'-style factorization with a fill-reducing symmetric
ordering.  The factorization is delegated to SuperLU run in symmetric mode
with diagonal pivoting disabled, which on an SPD matrix returns identical
row and column permutations and U = D L'; both properties are verified at
runtime and violation raises :class:`FactorizationError` so callers can fall
back to a dense path.

The selected inverse (Takahashi recursion) returns the entries of the full
inverse on the symmetrized sparsity pattern of the factor.  That pattern
contains the pattern of the input matrix, which is what the marginal
likelihood gradients need: traces of the inverse against matrices supported
on cliques of the Vecchia neighbor graph.
"""

import numpy as np
from numba import njit
from scipy import sparse
from scipy.sparse.linalg import splu


class FactorizationError(RuntimeError):
    """Sparse factorization failed or violated its SPD assumptions."""


@njit(cache=True)
def _find(Zp, Zi, i, k):
    # position of column k within the sorted row i, or -1
    lo = Zp[i]
    hi = Zp[i + 1]
    while lo < hi:
        mid = (lo + hi) >> 1
        c = Zi[mid]
        if c < k:
            lo = mid + 1
        elif c > k:
            hi = mid
        else:
            return mid
    return -1


@njit(cache=True)
def _takahashi(Lp, Li, Lx, d, Zp, Zi, Zx, missing_ok):
    # Z holds inverse entries on the full symmetric factor pattern (CSR with
    # sorted column indices).  Columns of L are processed from last to first;
    # the inner sums walk row i of Z and column j of L together, which keeps
    # the accesses sequential.  Every referenced entry must exist in the
    # pattern (the factor pattern is closed under this recursion); a missing
    # entry aborts with False, or reads as 0 when missing_ok is set.
    n = d.size
    for j in range(n - 1, -1, -1):
        c0 = Lp[j]
        c1 = Lp[j + 1]
        a0 = c0
        while a0 < c1 and Li[a0] <= j:
            a0 += 1
        diag_acc = 0.0
        for a in range(a0, c1):
            i = Li[a]
            row_end = Zp[i + 1]
            pos_ij = _find(Zp, Zi, i, j)
            if pos_ij < 0:
                return False
            # s = sum over k in col j (k > j) of L[k, j] * Z[i, k]
            s = 0.0
            b = pos_ij + 1
            for t in range(a0, c1):
                k = Li[t]
                while b < row_end and Zi[b] < k:
                    b += 1
                if b >= row_end or Zi[b] != k:
                    if not missing_ok:
                        return False
                    continue
                s += Lx[t] * Zx[b]
            zij = -s
            Zx[pos_ij] = zij
            pos_ji = _find(Zp, Zi, j, i)
            if pos_ji < 0:
                return False
            Zx[pos_ji] = zij
            diag_acc += Lx[a] * zij
        pos_jj = _find(Zp, Zi, j, j)
        if pos_jj < 0:
            return False
        Zx[pos_jj] = 1.0 / d[j] - diag_acc
    return True


@njit(cache=True)
def _gather_csr(Sp, Si, Sx, rows, cols, out, missing_ok):
    # out[t] = S[rows[t], cols[t]]; returns False if an entry is absent
    # and missing_ok is False, else missing entries read as 0
    for t in range(rows.size):
        pos = _find(Sp, Si, rows[t], cols[t])
        if pos < 0:
            if not missing_ok:
                return False
            out[t] = 0.0
        else:
            out[t] = Sx[pos]
    return True


class SparseLDL:
    """Factorization of a sparse SPD matrix for solves, log-determinant and
    selected inversion."""

    def __init__(self, A):
        A = A.tocsc()
        self.n = A.shape[0]
        try:
            self._lu = splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:
            raise FactorizationError(f"sparse factorization failed: {exc}") from exc
        if not np.array_equal(self._lu.perm_r, self._lu.perm_c):
            raise FactorizationError("asymmetric pivoting; matrix treated as not SPD")
        self.d = np.ascontiguousarray(self._lu.U.diagonal())
        if not np.all(np.isfinite(self.d)) or np.any(self.d <= 0):
            raise FactorizationError("non-positive pivot; matrix is not positive definite")
        # original index o sits at permuted position perm[o]
        self.perm = self._lu.perm_c

    def logdet(self):
        """log determinant of the factored matrix."""
        return float(np.sum(np.log(self.d)))

    def solve(self, rhs):
        """Solve A x = rhs for one vector or a (n, k) block."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            return self._lu.solve(rhs)
        out = np.empty_like(rhs)
        step = 64
        for lo in range(0, rhs.shape[1], step):
            out[:, lo : lo + step] = self._lu.solve(rhs[:, lo : lo + step])
        return out

    def selected_inverse(self, missing_as_zero=False):
        """Entries of A^{-1} on the symmetrized factor pattern.

        Returns a CSR matrix in the original (unpermuted) indexing whose
        sparsity pattern contains the pattern of A.  Raises
        :class:`FactorizationError` if the factor pattern is not closed
        under the Takahashi recursion.  With ``missing_as_zero`` a missing
        pattern position reads as 0 instead: the factorization prunes
        entries that are numerically exactly zero, which happens when the
        matrix decouples into independent blocks (e.g. correlations
        underflowing to 0 at extreme parameters), and across decoupled
        blocks the true inverse entry is exactly zero.
        """
        Lcsc = self._lu.L.tocsc()
        Lcsc.sort_indices()
        ones = sparse.csr_matrix(
            (np.ones(Lcsc.nnz), Lcsc.indices, Lcsc.indptr), shape=(self.n, self.n)
        ).T.tocsr()
        pat = (ones + ones.T).tocsr()  # full symmetric factor pattern
        pat.sort_indices()
        zx = np.zeros(pat.nnz)
        ok = _takahashi(
            Lcsc.indptr.astype(np.int64),
            Lcsc.indices.astype(np.int64),
            np.ascontiguousarray(Lcsc.data),
            self.d,
            pat.indptr.astype(np.int64),
            pat.indices.astype(np.int64),
            zx,
            missing_as_zero,
        )
        if not ok:
            raise FactorizationError("factor pattern not closed; selected inverse unavailable")
        Zs = sparse.csr_matrix((zx, pat.indices, pat.indptr), shape=(self.n, self.n))
        # back to original indexing: out[o1, o2] = Zs[perm[o1], perm[o2]]
        out = Zs[self.perm][:, self.perm].tocsr()
        out.sort_indices()
        return out


def gather_entries(S, rows, cols, missing_as_zero=False):
    """Values of sparse CSR matrix S at the given (row, col) positions.

    By default every requested position must be present in the sparsity
    pattern of S and a missing one raises :class:`FactorizationError`.
    With ``missing_as_zero`` absent positions read as 0.  That is the right
    semantics for a selected inverse: a position can drop out of the factor
    pattern only when the matrix decouples into independent blocks there,
    and the true inverse is exactly zero across decoupled blocks.
    """
    S = S.tocsr()
    if not S.has_sorted_indices:
        S.sort_indices()
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    out = np.empty(rows.size)
    ok = _gather_csr(
        S.indptr.astype(np.int64), S.indices.astype(np.int64), S.data,
        rows, cols, out, missing_as_zero,
    )
    if not ok:
        raise FactorizationError("requested entry outside the sparsity pattern")
    return out
