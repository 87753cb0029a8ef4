"""Vecchia approximation of the latent Gaussian process prior.

The joint density of the latent vector is factored along an ordering of the
latent points, with each conditional restricted to at most m previously
ordered neighbors.  Writing A_i for the regression coefficients of point i
on its neighbor set N(i) and D_i for the conditional variance,

    b_i | b_{<i} ~ Normal(A_i b_{N(i)}, D_i),

the implied precision is Q = B' D^{-1} B with B = I - (scattered A), which
is sparse and lets the Laplace approximation scale to large panels.

Everything in this module works in *ordered* indexing: row i of any array
refers to the i-th point of the supplied ordering.  The ``order`` array maps
back to the caller's original point indices.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .covariance import cov_from_sqdists, cov_grad_from_sqdists

_NBR_PAD = -1


def order_points(points, mode, rng=None):
    """Ordering of latent points for the Vecchia factorization.

    ``mode`` is 'spatial' (uniformly random order) or 'spacetime' (points
    sorted by time, random order within each time step).  Returns an index
    array ``order`` such that ``points[order]`` is the ordered sequence.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    rng = np.random.default_rng(rng)
    u = rng.random(n)
    if mode == "spatial":
        return np.lexsort((np.arange(n), u)).astype(np.int64)
    if mode == "spacetime":
        # lexsort uses the last key as primary
        return np.lexsort((np.arange(n), u, points[:, 0])).astype(np.int64)
    raise ValueError(f"unknown ordering mode {mode!r}")


def _scaled_sq_dists(a, b, metric, params):
    # Squared distances used for neighbor search, rows (t, x, y).
    dx = a[:, None, 1] - b[None, :, 1]
    dy = a[:, None, 2] - b[None, :, 2]
    s2 = dx * dx + dy * dy
    if metric == "euclidean":
        return s2
    if metric == "correlation":
        if params is None:
            raise ValueError("correlation metric requires covariance params")
        if params.spatial_only:
            return s2
        dt = a[:, None, 0] - b[None, :, 0]
        return (dt / params.rho_t) ** 2 + s2 / params.rho_s**2
    raise ValueError(f"unknown neighbor metric {metric!r}")


def select_neighbors(points, order, m, metric="euclidean", params=None, block=256):
    """Conditioning sets: up to m nearest predecessors for each ordered point.

    'euclidean' measures plain spatial distance; 'correlation' ranks
    predecessors by the anisotropic scaled distance implied by ``params``,
    which orders them by decreasing correlation.  Ties are broken toward the
    earlier ordered point.  Returns an (n, m) int array in ordered indexing,
    padded with -1 for rows that have fewer than m predecessors.
    """
    points = np.asarray(points, dtype=float)
    order = np.asarray(order)
    n = points.shape[0]
    m = int(m)
    if m < 0:
        raise ValueError("m must be >= 0")
    pts = points[order]
    nbr = np.full((n, m), _NBR_PAD, dtype=np.int64)
    if m == 0 or n <= 1:
        return nbr
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        if lo == 0:
            lo = 1  # row 0 has no predecessors
            if lo >= hi:
                continue
        d2 = _scaled_sq_dists(pts[lo:hi], pts[:hi], metric, params)
        for r in range(hi - lo):
            i = lo + r
            d2[r, i:] = np.inf
        # stable argsort: exact distance ties resolve to the smaller index
        idx = np.argsort(d2, axis=1, kind="stable")
        for r in range(hi - lo):
            i = lo + r
            k = min(i, m)
            nbr[i, :k] = idx[r, :k]
    return nbr


def _neighbor_blocks(pts, nbr, params, want_grad):
    # Covariance blocks between each point and its (padded) neighbor set.
    n, m = nbr.shape
    valid = nbr >= 0
    safe = np.where(valid, nbr, 0)
    npts = pts[safe]  # (n, m, 3)

    dt = pts[:, None, 0] - npts[:, :, 0]
    dx = pts[:, None, 1] - npts[:, :, 1]
    dy = pts[:, None, 2] - npts[:, :, 2]
    t2_in = dt * dt
    s2_in = dx * dx + dy * dy

    dtn = npts[:, :, None, 0] - npts[:, None, :, 0]
    dxn = npts[:, :, None, 1] - npts[:, None, :, 1]
    dyn = npts[:, :, None, 2] - npts[:, None, :, 2]
    t2_nn = dtn * dtn
    s2_nn = dxn * dxn + dyn * dyn

    if want_grad:
        c_in, dc_in = cov_grad_from_sqdists(t2_in, s2_in, params)
        c_nn, dc_nn = cov_grad_from_sqdists(t2_nn, s2_nn, params)
    else:
        c_in = cov_from_sqdists(t2_in, s2_in, params)
        c_nn = cov_from_sqdists(t2_nn, s2_nn, params)
        dc_in = dc_nn = None

    # padded slots: zero cross-covariance, identity block rows/columns
    pair_valid = valid[:, :, None] & valid[:, None, :]
    eye = np.eye(m)[None, :, :]
    c_in = np.where(valid, c_in, 0.0)
    c_nn = np.where(pair_valid, c_nn, eye)
    if want_grad:
        dc_in = [np.where(valid, g, 0.0) for g in dc_in]
        dc_nn = [np.where(pair_valid, g, 0.0) for g in dc_nn]
    return c_in, c_nn, dc_in, dc_nn, valid


def conditional_coeffs(pts, nbr, params, want_grad=False, jitter=1e-8):
    """Per-row regression coefficients on the neighbor sets.

    For each row i with neighbor covariance block C and cross covariances c,
    computes A_i = c' C^{-1} and D_i = c(0) - A_i c, batched over rows.
    Padded neighbor slots get zero coefficients.  Returns ``(A, D)`` or
    ``(A, D, dA, dD)`` with log-parameter gradients stacked in a list.
    """
    pts = np.asarray(pts, dtype=float)
    c_in, c_nn, dc_in, dc_nn, valid = _neighbor_blocks(pts, nbr, params, want_grad)
    n, m = nbr.shape
    c_ii = params.sigma2

    def solve_all(lhs, rhs):
        try:
            return np.linalg.solve(lhs, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            bump = jitter * params.sigma2 * np.eye(m)[None, :, :]
            return np.linalg.solve(lhs + bump, rhs[..., None])[..., 0]

    if m > 0:
        A = solve_all(c_nn, c_in)
        D = c_ii - np.einsum("nk,nk->n", A, c_in)
    else:
        A = np.zeros((n, 0))
        D = np.full(n, c_ii)

    bad = D <= 0
    if np.any(bad):
        # nearly singular neighbor blocks (e.g. co-located points): retry with
        # a jittered diagonal, then clamp at a tiny positive variance
        if m > 0:
            bump = jitter * params.sigma2
            c_nn_j = c_nn[bad] + bump * np.eye(m)[None, :, :]
            A[bad] = np.linalg.solve(c_nn_j, c_in[bad][..., None])[..., 0]
            D[bad] = c_ii - np.einsum("nk,nk->n", A[bad], c_in[bad])
        still = D <= 0
        if np.any(still):
            warnings.warn(
                f"{int(still.sum())} conditional variances clamped to a small "
                "positive floor; neighbor sets are numerically degenerate"
            )
            D[still] = np.maximum(D[still], 1e-12 * params.sigma2)

    if not want_grad:
        return A, D

    dA, dD = [], []
    k_names = params.names()
    for k in range(len(k_names)):
        dcii = params.sigma2 if k == 0 else 0.0
        if m > 0:
            rhs = dc_in[k] - np.einsum("nij,nj->ni", dc_nn[k], A)
            dAk = solve_all(c_nn, rhs)
            dDk = dcii - np.einsum("nk,nk->n", dAk, c_in) - np.einsum(
                "nk,nk->n", A, dc_in[k]
            )
        else:
            dAk = np.zeros((n, 0))
            dDk = np.full(n, dcii)
        dA.append(dAk)
        dD.append(dDk)
    return A, D, dA, dD


def build_vecchia(points, order, nbr, params, want_grad=False):
    """Assemble the Vecchia structure for given ordering and neighbor sets."""
    points = np.asarray(points, dtype=float)
    order = np.asarray(order)
    pts = points[order]
    out = conditional_coeffs(pts, nbr, params, want_grad=want_grad)
    if want_grad:
        A, D, dA, dD = out
    else:
        (A, D), dA, dD = out, None, None
    return VecchiaStructure(
        points=points, order=order, nbr=nbr, params=params, A=A, D=D, dA=dA, dD=dD
    )


@dataclass
class VecchiaStructure:
    """Sparse factorization B, D of the approximate latent prior.

    ``A`` holds the neighbor regression coefficients row-wise (padded with
    zeros), ``D`` the conditional variances.  The implied prior precision is
    ``B' diag(1/D) B``; its log-determinant is ``-sum(log D)``.
    """

    points: np.ndarray
    order: np.ndarray
    nbr: np.ndarray
    params: object
    A: np.ndarray
    D: np.ndarray
    dA: list | None = None
    dD: list | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def has_grad(self):
        return self.dA is not None

    def log_det_prior_cov(self):
        """log determinant of the implied prior covariance."""
        return float(np.sum(np.log(self.D)))

    def b_matrix(self):
        """Sparse B = I - scattered A, unit lower triangular (ordered idx)."""
        if "B" not in self._cache:
            n, m = self.nbr.shape
            valid = self.nbr >= 0
            rows = np.repeat(np.arange(n), valid.sum(axis=1))
            cols = self.nbr[valid]
            vals = -self.A[valid]
            eye_r = np.arange(n)
            coo = sparse.coo_matrix(
                (
                    np.concatenate([np.ones(n), vals]),
                    (np.concatenate([eye_r, rows]), np.concatenate([eye_r, cols])),
                ),
                shape=(n, n),
            )
            self._cache["B"] = coo.tocsr()
        return self._cache["B"]

    def whiten(self, b):
        """B @ b, the innovations of a latent vector (ordered indexing)."""
        return self.b_matrix() @ b

    def quad_form(self, b):
        """b' Q b without forming Q."""
        r = self.whiten(b)
        return float(np.sum(r * r / self.D))

    def log_density(self, b):
        """Mean-zero Gaussian log density of b under the approximate prior."""
        n = self.n
        return -0.5 * (n * np.log(2.0 * np.pi) + self.log_det_prior_cov()
                       + self.quad_form(b))

    def quad_form_grads(self, b):
        """Gradient of b' Q b in the log covariance parameters."""
        if not self.has_grad:
            raise ValueError("structure was built without gradients")
        r = self.whiten(b)
        valid = self.nbr >= 0
        safe = np.where(valid, self.nbr, 0)
        b_nbr = np.where(valid, b[safe], 0.0)  # (n, m)
        out = []
        for dAk, dDk in zip(self.dA, self.dD):
            dr = -np.einsum("nk,nk->n", dAk, b_nbr)
            out.append(float(np.sum(2.0 * r * dr / self.D - r * r * dDk / self.D**2)))
        return np.asarray(out)

    def _pattern(self):
        # shared COO layout of Q and its parameter gradients: for each row i
        # all pairs over the support {i} union N(i), padded slots folded into
        # the diagonal with zero coefficient
        if "pat" not in self._cache:
            n, m = self.nbr.shape
            supp = np.concatenate(
                [np.arange(n)[:, None], np.where(self.nbr >= 0, self.nbr, np.arange(n)[:, None])],
                axis=1,
            )  # (n, m+1)
            R = np.broadcast_to(supp[:, :, None], (n, m + 1, m + 1)).ravel()
            C = np.broadcast_to(supp[:, None, :], (n, m + 1, m + 1)).ravel()
            perm = np.lexsort((C, R))
            Rs, Cs = R[perm], C[perm]
            boundary = np.empty(Rs.size, dtype=bool)
            boundary[0] = True
            np.not_equal(Rs[1:], Rs[:-1], out=boundary[1:])
            boundary[1:] |= Cs[1:] != Cs[:-1]
            starts = np.flatnonzero(boundary)
            indices = Cs[starts]
            rows_unique = Rs[starts]
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.add.at(indptr, rows_unique + 1, 1)
            np.cumsum(indptr, out=indptr)
            self._cache["pat"] = (perm, starts, indices.astype(np.int32), indptr)
        return self._cache["pat"]

    def _coefs(self):
        # per-row coefficient vectors of B on the support layout
        n, m = self.nbr.shape
        valid = self.nbr >= 0
        coef = np.concatenate(
            [np.ones((n, 1)), np.where(valid, -self.A, 0.0)], axis=1
        )
        return coef

    def _assemble(self, vals):
        perm, starts, indices, indptr = self._pattern()
        data = np.add.reduceat(vals.ravel()[perm], starts)
        return sparse.csr_matrix((data, indices, indptr), shape=(self.n, self.n))

    def precision(self):
        """Sparse prior precision Q = B' diag(1/D) B (ordered indexing)."""
        if "Q" not in self._cache:
            coef = self._coefs()
            v = coef[:, :, None] * coef[:, None, :] / self.D[:, None, None]
            self._cache["Q"] = self._assemble(v)
        return self._cache["Q"]

    def precision_grads(self):
        """d Q / d log-params, same sparsity pattern as ``precision()``."""
        if not self.has_grad:
            raise ValueError("structure was built without gradients")
        if "dQ" not in self._cache:
            n, m = self.nbr.shape
            valid = self.nbr >= 0
            coef = self._coefs()
            out = []
            for dAk, dDk in zip(self.dA, self.dD):
                dcoef = np.concatenate(
                    [np.zeros((n, 1)), np.where(valid, -dAk, 0.0)], axis=1
                )
                v = (
                    dcoef[:, :, None] * coef[:, None, :]
                    + coef[:, :, None] * dcoef[:, None, :]
                ) / self.D[:, None, None]
                v -= (
                    coef[:, :, None]
                    * coef[:, None, :]
                    * (dDk / self.D**2)[:, None, None]
                )
                out.append(self._assemble(v))
            self._cache["dQ"] = out
        return self._cache["dQ"]

    def log_det_prior_grads(self):
        """d log|prior covariance| / d log-params = sum_i dD_i / D_i."""
        if not self.has_grad:
            raise ValueError("structure was built without gradients")
        return np.asarray([float(np.sum(dDk / self.D)) for dDk in self.dD])

    def implied_cov_dense(self):
        """Dense implied prior covariance B^{-1} D B^{-T} (small n only)."""
        from scipy.linalg import solve_triangular

        Bd = self.b_matrix().toarray()
        Binv = solve_triangular(Bd, np.eye(self.n), lower=True, unit_diagonal=True)
        return (Binv * self.D[None, :]) @ Binv.T


@dataclass
class LatentField:
    """Latent points plus the fitting-time Vecchia state.

    Bundles the ordering, neighbor sets and current covariance parameters,
    caching the assembled structure between calls.  ``opt_iterations``
    counts covariance optimizer steps cumulatively across a whole fit; the
    neighbor sets of correlation-metric fields are refreshed whenever that
    counter passes a power of two, since they depend on the parameters.
    """

    points: np.ndarray
    order: np.ndarray
    nbr: np.ndarray
    params: object
    metric: str
    m: int
    opt_iterations: int = 0
    b_warm: np.ndarray | None = None
    _pat: tuple | None = None
    _struct: object = None

    @classmethod
    def build(cls, points, params, mode, m, rng=None):
        """Order points, pick neighbors and return a ready field.

        ``mode`` is 'spatial' or 'spacetime'; the neighbor metric follows it
        (plain spatial distance, or correlation under the current params).
        """
        points = np.asarray(points, dtype=float)
        order = order_points(points, mode, rng=rng)
        metric = "euclidean" if mode == "spatial" else "correlation"
        nbr = select_neighbors(points, order, m, metric=metric, params=params)
        return cls(points=points, order=order, nbr=nbr, params=params, metric=metric, m=m)

    @property
    def n(self):
        return self.points.shape[0]

    def structure(self, want_grad=False):
        """Vecchia structure at the current parameters (cached)."""
        s = self._struct
        if s is None or s.params is not self.params or (want_grad and not s.has_grad):
            s = build_vecchia(self.points, self.order, self.nbr, self.params, want_grad=want_grad)
            if self._pat is None:
                self._pat = s._pattern()
            else:
                s._cache["pat"] = self._pat
            self._struct = s
        return s

    def set_params(self, params):
        if params is not self.params:
            self.params = params
            self._struct = None

    def refresh_neighbors(self):
        """Recompute neighbor sets under the current parameters.

        Only meaningful for the correlation metric; a euclidean field keeps
        its neighbor sets (they do not depend on the parameters).
        """
        if self.metric != "correlation":
            return
        self.nbr = select_neighbors(
            self.points, self.order, self.m, metric=self.metric, params=self.params
        )
        self._struct = None
        self._pat = None
