"""Cholesky factorizations (full-rank and rank-deficient) and Mahalanobis
distances.

The rank-deficient path produces the permuted, row-scaled staircase form
needed by the singular box-probability integrand: rows are grouped into
blocks by the last pivot column they load on, and every row is scaled so
that entry equals one.  Variables with zero variance carry no pivot at
all and are reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

__all__ = ["ScaleFactor", "cholesky", "singular_cholesky", "mahalanobis_sq"]


@dataclass(frozen=True)
class ScaleFactor:
    """Lower-triangular factor of a scale matrix, possibly rank-deficient.

    Attributes
    ----------
    C : ndarray, shape (d, d)
        Lower-triangular factor.  In the singular case rows are permuted
        and scaled into staircase form with unit pivots.
    rank : int
        Number of pivot columns r (= d when full rank).
    perm : ndarray
        ``perm[i]`` is the original index of permuted row ``i``.
    row_scales : ndarray
        Scalar each permuted row of the unscaled factor was divided by;
        all ones in the full-rank case.  A negative entry means the
        corresponding constraint flips orientation when limits are scaled.
    block_heads : ndarray, shape (rank,)
        First (permuted) row index of each pivot block.
    degenerate_rows : ndarray
        Original indices of zero-variance variables (empty unless the
        input had all-zero rows); they sit as zero rows at the bottom of
        ``C`` outside any block.
    """

    C: np.ndarray
    rank: int
    perm: np.ndarray
    row_scales: np.ndarray
    block_heads: np.ndarray
    degenerate_rows: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))

    @property
    def dim(self) -> int:
        return self.C.shape[0]

    @property
    def is_full_rank(self) -> bool:
        return self.rank == self.dim and len(self.degenerate_rows) == 0

    @property
    def log_det(self) -> float:
        """log |Sigma| (full rank only)."""
        if not self.is_full_rank:
            raise ValueError("log_det requires a full-rank factor")
        return float(2.0 * np.sum(np.log(np.diag(self.C))))

    def block_sizes(self) -> np.ndarray:
        n_blocked = self.dim - len(self.degenerate_rows)
        ends = np.append(self.block_heads[1:], n_blocked)
        return ends - self.block_heads

    def mixing_matrix(self) -> np.ndarray:
        """d x rank matrix A with A A^T equal to the scale matrix, rows in
        original order (the sampling factor)."""
        A = self.C[:, : self.rank] * self.row_scales[:, None]
        return A[np.argsort(self.perm)]

    def reconstruct(self) -> np.ndarray:
        """Rebuild the scale matrix from the factor."""
        A = self.mixing_matrix()
        return A @ A.T


def _check_square_symmetric(sigma: np.ndarray) -> None:
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("scale matrix must be square")
    if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-12):
        raise ValueError("scale matrix must be symmetric")


def cholesky(sigma: np.ndarray, *, allow_singular: bool = False,
             tol_zero: float | None = None) -> ScaleFactor:
    """Cholesky factor of a symmetric positive-definite matrix.

    With ``allow_singular=True`` a non-PD pivot routes the input to
    :func:`singular_cholesky` instead of raising.
    """
    sigma = np.asarray(sigma, dtype=float)
    _check_square_symmetric(sigma)
    d = sigma.shape[0]
    try:
        C = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        if allow_singular:
            return singular_cholesky(sigma, tol_zero=tol_zero)
        raise ValueError("scale matrix is not positive definite") from None
    return ScaleFactor(
        C=C,
        rank=d,
        perm=np.arange(d),
        row_scales=np.ones(d),
        block_heads=np.arange(d),
    )


def singular_cholesky(sigma: np.ndarray, tol_zero: float | None = None) -> ScaleFactor:
    """Staircase factorization of a positive-semidefinite matrix.

    Rows are processed in natural order; a row whose residual variance
    falls below ``tol_zero`` is dependent and is filed behind the pivot of
    the last column it loads on.  Each row is then scaled so its entry in
    its block column equals one.  Full-rank inputs come out unpermuted
    with unit-pivot scaling as the only difference from :func:`cholesky`.
    """
    sigma = np.asarray(sigma, dtype=float)
    _check_square_symmetric(sigma)
    d = sigma.shape[0]
    diag = np.diag(sigma).astype(float)
    diag_max = float(diag.max(initial=0.0))
    if diag_max <= 0.0:
        raise ValueError("scale matrix has rank 0")
    if tol_zero is None:
        tol_zero = 1e-10 * diag_max

    zero_rows = np.flatnonzero(diag <= tol_zero)
    active = np.flatnonzero(diag > tol_zero)
    m = len(active)
    sub = sigma[np.ix_(active, active)]

    # One pass in natural order: each row's coefficients on the pivots
    # found so far come from a triangular solve; positive residual
    # variance creates a new pivot.
    pivots: list[int] = []
    coeffs = np.zeros((m, m))
    pivot_variance = np.zeros(m)
    is_pivot = np.zeros(m, dtype=bool)
    for i in range(m):
        r = len(pivots)
        if r:
            c = solve_triangular(
                coeffs[np.ix_(pivots, range(r))], sub[pivots, i], lower=True
            )
        else:
            c = np.zeros(0)
        resid = sub[i, i] - float(c @ c)
        coeffs[i, :r] = c
        if resid > tol_zero:
            coeffs[i, r] = np.sqrt(resid)
            pivot_variance[i] = resid
            is_pivot[i] = True
            pivots.append(i)
    rank = len(pivots)

    # Last pivot column each row loads on; the column floor guarantees a
    # nonzero entry exists for every active row.
    tol_col = np.sqrt(tol_zero / max(d, 1))
    last_col = np.empty(m, dtype=int)
    for i in range(m):
        if is_pivot[i]:
            last_col[i] = pivots.index(i)
        else:
            nz = np.flatnonzero(np.abs(coeffs[i, :rank]) > tol_col)
            if len(nz) == 0:
                raise ValueError(
                    "dependent row with no resolvable pivot column; "
                    "input is not positive semidefinite to tolerance"
                )
            last_col[i] = nz[-1]
            coeffs[i, last_col[i] + 1 :] = 0.0

    # Staircase order: pivot row first within each block, dependents after.
    order = []
    block_heads = []
    for l in range(rank):
        block_heads.append(len(order))
        order.append(pivots[l])
        order.extend(i for i in range(m) if not is_pivot[i] and last_col[i] == l)
    order = np.array(order, dtype=int)

    row_scales = np.ones(d)
    C = np.zeros((d, d))
    for pos, i in enumerate(order):
        s = coeffs[i, last_col[i]]
        row_scales[pos] = s
        C[pos, : last_col[i] + 1] = coeffs[i, : last_col[i] + 1] / s

    perm = np.concatenate([active[order], zero_rows]).astype(int)
    return ScaleFactor(
        C=C,
        rank=rank,
        perm=perm,
        row_scales=row_scales,
        block_heads=np.array(block_heads, dtype=int),
        degenerate_rows=zero_rows.astype(int),
    )


def mahalanobis_sq(x: np.ndarray, mu: np.ndarray, factor: ScaleFactor) -> np.ndarray | float:
    """Squared Mahalanobis distance via a triangular solve.

    ``x`` may be a single d-vector or an (n, d) batch.  Requires a
    full-rank factor: the quadratic form does not exist otherwise.
    """
    if not factor.is_full_rank:
        raise ValueError("mahalanobis_sq requires a full-rank scale factor")
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    single = x.ndim == 1
    diff = np.atleast_2d(x) - mu[None, :]
    z = solve_triangular(factor.C, diff.T, lower=True)
    d2 = np.einsum("ij,ij->j", z, z)
    if single:
        return float(d2[0])
    return d2
